"""Shared fixtures: simulated topologies and in-process clusters."""
from __future__ import annotations

import json
import random
import threading
from pathlib import Path

from sonoma.agent import AgentConfig, CallbackNotifier, MeasurementAgent, SimBackend
from sonoma.management import ManagementLayer, MLConfig
from sonoma.management import server as mlserver
from sonoma.management.aas import AccountStore
from sonoma.simnet import SimLink, SimNode, SimTopology, duplex
from sonoma.vo import VoStore

# generous registered quota so tests can poll freely
HIGH_QUOTAS = {"REGISTERED": {"maxRequestsPerMinute": 1_000_000}}
ACCOUNTS = {"alice": {"credential": "secret", "privilege": "REGISTERED"}}


def ip(i: int) -> str:
    return f"10.0.{i // 250}.{i % 250 + 1}"


def line_topology(n: int = 3, delay_ms: float = 1.0, capacity: float = 100.0) -> SimTopology:
    nodes = tuple(SimNode(f"n{i}", ip(i)) for i in range(n))
    links = [l for i in range(n - 1) for l in duplex(f"n{i}", f"n{i + 1}", delay_ms, capacity)]
    return SimTopology(nodes, tuple(links))


def random_topology(rng: random.Random, n_agents: int = 8, n_routers: int = 6,
                    extra_links: int = 6) -> SimTopology:
    """Connected random graph; agents hang off routers, routers form a random tree plus chords."""
    routers = [f"r{i}" for i in range(n_routers)]
    agents = [f"a{i}" for i in range(n_agents)]
    nodes = [SimNode(a, ip(i)) for i, a in enumerate(agents)]
    nodes += [SimNode(r, ip(100 + i)) for i, r in enumerate(routers)]
    pairs = set()
    for i in range(1, n_routers):
        pairs.add((routers[rng.randrange(i)], routers[i]))
    for _ in range(extra_links):
        a, b = rng.sample(routers, 2)
        if (b, a) not in pairs:
            pairs.add((a, b))
    for a in agents:
        pairs.add((a, rng.choice(routers)))
    links = []
    for a, b in sorted(pairs):
        links += duplex(a, b, round(rng.uniform(0.2, 5.0), 3), rng.choice([100.0, 1000.0]))
    return SimTopology(tuple(nodes), tuple(links))


def bottleneck_topology(rng: random.Random) -> SimTopology:
    """src - r1 - r2 - dst with one tight middle link whose available bandwidth is in [5, 80] Mbps."""
    avail = rng.uniform(5.0, 80.0)
    cross = rng.uniform(0.0, 0.6) * avail
    capacity = avail + cross
    nodes = (SimNode("src", "10.1.0.1"), SimNode("r1", "10.1.0.2"), SimNode("r2", "10.1.0.3"),
             SimNode("dst", "10.1.0.4"))
    links = (*duplex("src", "r1", rng.uniform(0.5, 5), 1000.0),
             *duplex("r1", "r2", rng.uniform(1, 20), capacity, cross),
             *duplex("r2", "dst", rng.uniform(0.5, 5), 1000.0))
    return SimTopology(nodes, links)


class Cluster:
    """A management layer plus one HTTP agent per listed node, all in this process."""

    def __init__(self, topo: SimTopology, tmp: Path, agents: list[str] | None = None,
                 notifier_factory=None, pacing_sec: float = 0.0, quotas: dict | None = None,
                 capabilities: dict[str, list[str]] | None = None, gray: dict | None = None,
                 config: dict | None = None, lease_factor: float = 2.0):
        self.topo = topo
        self.tmp = Path(tmp)
        topo_path = self.tmp / "topology.json"
        topo.dump(topo_path)
        cfg = MLConfig.from_dict({"voPath": str(self.tmp / "vo.sqlite"), "quotas": quotas if quotas is not None else HIGH_QUOTAS,
                                  "syncPollSec": 0.2, **(config or {})})
        self.vo = VoStore(cfg.vo_path)
        self.ml = ManagementLayer(cfg, vo=self.vo, accounts=AccountStore(ACCOUNTS))
        self.ml_server = mlserver.serve(self.ml, "127.0.0.1:0")
        self.url = self.ml_server.url
        self.agents: dict[str, MeasurementAgent] = {}
        self._servers = [self.ml_server]
        for node_id in agents or [n.node_id for n in topo.nodes]:
            caps = (capabilities or {}).get(node_id)
            ac = AgentConfig(node_id=node_id, ml_callback_url=self.url, topology_path=str(topo_path),
                             sim_pacing_sec=pacing_sec, lease_factor=lease_factor,
                             **({"capabilities": caps} if caps else {}))
            notifier = notifier_factory(self.url) if notifier_factory else CallbackNotifier(self.url)
            agent = MeasurementAgent(ac, backend=SimBackend(topo, node_id), notifier=notifier)
            srv = agent.serve("127.0.0.1:0")
            self._servers.append(srv)
            self.agents[node_id] = agent
            self.ml.register_agent(node_id, srv.url, (gray or {}).get(node_id))

    def session(self, user: str = "alice", credential: str = "secret", zip: bool = False,
                fmt: str = "CSV") -> str:
        return self.ml.request_session(user, credential, zip, fmt)

    def guest(self, **kw) -> str:
        return self.session("guest", "", **kw)

    def close(self) -> None:
        self.ml.shutdown()
        for srv in self._servers:
            srv.stop()
        self.vo.close()


def wait_terminal(ml: ManagementLayer, sid: str, pid: str, timeout: float = 30.0) -> dict:
    done = threading.Event()
    info = {}
    deadline = timeout
    while deadline > 0:
        info = ml.get_process_info(sid, pid)
        if info["state"] in ("FINISHED", "FAILED", "KILLED"):
            return info
        done.wait(0.1)
        deadline -= 0.1
    raise AssertionError(f"process {pid} still {info.get('state')} after {timeout} s")


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2))
    return path
