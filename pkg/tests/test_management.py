from __future__ import annotations

import re
import threading
import time

import pytest

from sonoma import simnet
from sonoma.model import ErrorCode, GrayList, Layer, SonomaError
from sonoma.simnet import SimNode, SimTopology, duplex
from sonoma.vo import parse_output

from support import Cluster, line_topology, wait_terminal


def code_of(fn, *args, **kw):
    with pytest.raises(SonomaError) as e:
        fn(*args, **kw)
    return e.value.code


@pytest.fixture
def make(tmp_path):
    made = []

    def factory(topo, **kw):
        c = Cluster(topo, tmp_path / f"c{len(made)}", **kw)
        made.append(c)
        return c

    (tmp_path / "c0").mkdir()
    for i in range(1, 6):
        (tmp_path / f"c{i}").mkdir()
    yield factory
    for c in made:
        c.close()


def agent_done(agent, task_id):
    # dispatch is asynchronous, the agent may not know the task yet
    try:
        return agent.task_state(task_id).terminal
    except SonomaError:
        return False


def partitioned():
    nodes = tuple(SimNode(f"n{i}", f"10.0.0.{i + 1}") for i in range(4))
    return SimTopology(nodes, (*duplex("n0", "n1", 1.0, 100.0), *duplex("n1", "n2", 1.0, 100.0)))


# -- sessions and lookup -----------------------------------------------------


def test_version_and_sessions(cluster):
    ml = cluster.ml
    assert ml.get_version() == "0.1.0" == ml.get_version()
    assert code_of(ml.request_session, "nobody", "x") is ErrorCode.AUTH_FAILED
    assert code_of(ml.request_session, "guest", "", False, "JSON") is ErrorCode.UNSUPPORTED_FORMAT
    sid = cluster.guest()
    assert ml.close_session(sid) == {"acknowledged": True}
    assert code_of(ml.close_session, sid) is ErrorCode.UNKNOWN_SESSION
    assert code_of(ml.get_node_list, "bogus") is ErrorCode.UNKNOWN_SESSION


def test_node_list_filter_and_offline(make):
    c = make(line_topology(3), capabilities={"n1": ["PING", "TRACEROUTE"]})
    sid = c.session()
    assert len(c.ml.get_node_list(sid)) == 3
    assert sorted(n["nodeId"] for n in c.ml.get_node_list(sid, "CHIRP")) == ["n0", "n2"]
    assert code_of(c.ml.get_node_list, sid, "TELEPORT") is ErrorCode.PARAM_ERROR
    # stop n2's server: three missed health probes take it offline
    entry = next(e for e in c.ml.registry.entries() if e.node_id == "n2")
    c._servers[3].stop()
    for _ in range(3):
        c.ml.registry.probe("n2")
    assert not entry.online
    assert sorted(n["nodeId"] for n in c.ml.get_node_list(sid)) == ["n0", "n1"]
    assert code_of(c.ml.short_ping, sid, "n2", "n0") is ErrorCode.NODE_UNAVAILABLE


def test_accounting(cluster):
    sid = cluster.session()
    cluster.ml.short_ping(sid, "n0", "n1", count=1)
    acc = cluster.ml.accounting()
    assert [s["requestCount"] for s in acc["sessions"] if s["sessionId"] == sid] == [1]
    assert {a["nodeId"]: a["taskCount"] for a in acc["agents"]} == {"n0": 1, "n1": 0, "n2": 0}


# -- ping / traceroute ---------------------------------------------------------


def test_short_ping_example_and_vo_first(make):
    nodes = (SimNode("A", "10.5.0.1"), SimNode("B", "10.5.0.2"))
    c = make(SimTopology(nodes, duplex("A", "B", 1.0, 100.0)))
    sid = c.session()
    res = c.ml.short_ping(sid, "A", "B", count=3, size_bytes=1000, interval_sec=1.0)
    assert res["result"]["rttMs"] == [2.16, 2.16, 2.16]
    stored = c.vo.retrieve(sid, res["processId"], Layer.RAW)
    assert [r["rttMs"] for g in stored.values() for r in g] == [2.16] * 3
    assert code_of(c.ml.short_ping, sid, "A", "B", count=5000) is ErrorCode.SECURITY_REJECTED
    assert code_of(c.ml.short_ping, sid, "A", "224.0.0.1") is ErrorCode.SECURITY_REJECTED
    assert code_of(c.ml.short_ping, sid, "A", "not-a-node") is ErrorCode.PARAM_ERROR


def test_long_ping_handle(cluster):
    sid = cluster.session()
    h = cluster.ml.long_ping(sid, "n0", "n2", count=4, interval_sec=0.5)
    assert h["state"] == "SCHEDULED"
    assert h["expectedDurationSec"] == 4 * 1 + 2  # single task: the agent's own estimate
    info = wait_terminal(cluster.ml, sid, h["processId"])
    assert info == {"processId": h["processId"], "kind": "PING", "state": "FINISHED", "completedTasks": 1,
                    "totalTasks": 1, "expectedDurationSec": 6.0}


def test_parallel_ping_with_unreachable_target(make):
    c = make(partitioned())
    sid = c.session()
    h = c.ml.parallel_ping(sid, "n0", ["n1", "n2", "n3"], count=2)
    assert wait_terminal(c.ml, sid, h["processId"])["state"] == "FINISHED"
    assert len(c.ml.process_handle(h["processId"]).tasks) == 3
    groups = c.vo.retrieve(sid, h["processId"], Layer.RAW)
    by_target = {g[0]["target"]: [r["rttMs"] for r in g] for g in groups.values()}
    assert by_target["10.0.0.4"] == [None, None]
    assert all(v is not None for v in by_target["10.0.0.3"])
    assert code_of(c.ml.parallel_ping, sid, "n0", []) is ErrorCode.PARAM_ERROR


def test_ensemble_ping_matches_oracle(make):
    topo = line_topology(4)
    c = make(topo, capabilities={"n3": ["TRACEROUTE"]})
    sid = c.session()
    h = c.ml.ensemble_ping(sid, ["n0", "n1"], ["n1", "n2", "n3"], count=2, size_bytes=100)
    wait_terminal(c.ml, sid, h["processId"])
    assert len(c.ml.process_handle(h["processId"]).tasks) == 6
    rows = parse_output(c.ml.get_results(sid, h["processId"])["payload"], "CSV")
    got = {}
    for r in rows:
        got.setdefault((r["source"], r["target"]), []).append(float(r["rttMs"]))
    for s in ("n0", "n1"):
        for t in ("n1", "n2", "n3"):
            expected = simnet.ping_probes(topo, s, t, 2, 100)
            assert got[(topo.address(s), topo.address(t))] == expected
    assert code_of(c.ml.ensemble_ping, sid, ["n3"], ["n0"]) is ErrorCode.CAPABILITY_MISSING


def test_traceroute_family(cluster):
    ml = cluster.ml
    sid = cluster.session()
    res = ml.short_traceroute(sid, "n0", "n2")["result"]
    assert [h["address"] for h in res["hops"]] == ["10.0.0.2", "10.0.0.3"]
    assert res["hops"][0]["rttMs"] < res["hops"][1]["rttMs"]
    assert code_of(ml.short_traceroute, sid, "n0", "n0") is ErrorCode.PARAM_ERROR
    h = ml.ensemble_traceroute(sid, ["n0", "n1", "n2"], ["n0", "n1", "n2"])
    # full mesh without self pairs, the same task set a topology run creates
    assert len(ml.process_handle(h["processId"]).tasks) == 6
    h2 = ml.parallel_traceroute(sid, "n0", ["n1", "n2"])
    h3 = ml.long_traceroute(sid, "n2", "n0")
    for pid in (h["processId"], h2["processId"], h3["processId"]):
        assert wait_terminal(ml, sid, pid)["state"] == "FINISHED"


# -- chirp / train / bandwidth -------------------------------------------------


def test_short_chirp_uncongested(cluster):
    sid = cluster.session()
    recs = cluster.ml.short_chirp(sid, "n0", "n2", n_packets=12, size_bytes=1000, initial_gap_us=4000,
                                  gap_ratio=0.9)["records"]
    send = [r["sendTimestampUs"] for r in recs]
    recv = [r["recvTimestampUs"] for r in recs]
    assert [b - a for a, b in zip(send, send[1:])] == [b - a for a, b in zip(recv, recv[1:])]
    assert code_of(cluster.ml.short_chirp, sid, "n0", "n0") is ErrorCode.PARAM_ERROR


def test_chirp_busy_and_gray_list(make):
    c = make(line_topology(3), pacing_sec=0.01, gray={"n2": GrayList(100, 1500)})
    sid = c.session()
    h = c.ml.long_chirp(sid, "n0", "n1", n_packets=40, size_bytes=1000, initial_gap_us=20000, gap_ratio=0.95)
    assert code_of(c.ml.short_chirp, sid, "n1", "n0", n_packets=5, size_bytes=1000, initial_gap_us=20000,
                   gap_ratio=0.95) is ErrorCode.BUSY
    # the failed request held no partial reservation
    assert c.ml.broker.holder_of("n0") == c.ml.broker.holder_of("n1") == h["processId"]
    wait_terminal(c.ml, sid, h["processId"])
    assert c.ml.broker.holder_of("n0") is None
    # peak rate 1e6 / (2000 * 0.9**3) = 686 pps over n2's 100 pps gray list
    assert code_of(c.ml.short_chirp, sid, "n0", "n2", n_packets=5, size_bytes=1000, initial_gap_us=2000,
                   gap_ratio=0.9) is ErrorCode.SECURITY_REJECTED


def test_kill_long_chirp_frees_reservations(make):
    c = make(line_topology(3), pacing_sec=0.05)
    sid = c.session()
    h = c.ml.long_chirp(sid, "n0", "n2", n_packets=40, size_bytes=1000, initial_gap_us=20000, gap_ratio=0.95)
    pid = h["processId"]
    deadline = time.monotonic() + 5
    while c.ml.get_process_info(sid, pid)["state"] != "RUNNING" and time.monotonic() < deadline:
        time.sleep(0.02)
    time.sleep(0.3)
    assert c.ml.kill_process(sid, pid) == {"acknowledged": True, "state": "KILLED"}
    assert c.ml.broker.holder_of("n0") is None and c.ml.broker.holder_of("n2") is None
    assert c.agents["n0"].reservation.holder is None and c.agents["n2"].reservation.holder is None
    res = c.ml.get_results(sid, pid)
    assert res["state"] == "KILLED" and res["partial"]
    rows = parse_output(res["payload"], "CSV")
    assert 0 < len(rows) < 40
    assert c.ml.kill_process(sid, pid)["state"] == "KILLED"  # no-op


def test_short_train_dispersion(make):
    nodes = (SimNode("s", "10.6.0.1"), SimNode("r", "10.6.0.2"), SimNode("d", "10.6.0.3"), SimNode("e", "10.6.0.4"))
    topo = SimTopology(nodes, (*duplex("s", "r", 1.0, 1000.0), *duplex("r", "d", 1.0, 10.0),
                               *duplex("r", "e", 1.0, 1000.0)))
    c = make(topo, agents=["s", "d", "e"])
    sid = c.session()
    recs = c.ml.short_train(sid, "s", ["d"], n_packets=8, size_bytes=1500)["records"]
    recv = [r["recvTimestampUs"] for r in recs]
    assert [b - a for a, b in zip(recv, recv[1:])] == [1200] * 7
    res = c.ml.short_train(sid, "s", ["d", "e"], n_packets=6, size_bytes=1500)
    handle = c.ml.process_handle(res["processId"])
    assert len(handle.tasks) == 3  # two captures and the sender
    assert [r["destination"] for r in res["records"]] == ["10.6.0.3", "10.6.0.4"] * 3
    assert code_of(c.ml.short_train, sid, "s", []) is ErrorCode.PARAM_ERROR
    assert code_of(c.ml.short_train, sid, "s", ["s"]) is ErrorCode.PARAM_ERROR


@pytest.mark.parametrize("capacity,cross", [(10.0, 0.0), (100.0, 40.0)])
def test_available_bandwidth(make, capacity, cross):
    nodes = (SimNode("s", "10.7.0.1"), SimNode("r", "10.7.0.2"), SimNode("d", "10.7.0.3"))
    topo = SimTopology(nodes, (*duplex("s", "r", 1.0, 1000.0), *duplex("r", "d", 2.0, capacity, cross)))
    c = make(topo, agents=["s", "d"])
    sid = c.guest()
    res = c.ml.get_available_bandwidth(sid, "s", "d")
    truth = simnet.ground_truth_available_bandwidth(topo, "s", "d")
    assert res["bandwidthMbps"] == pytest.approx(truth, rel=0.10)
    pid = res["processIdOfRawData"]
    assert c.vo.retrieve(sid, pid, Layer.PROCESSED) == {
        None: [{"source": "10.7.0.1", "destination": "10.7.0.3", "bandwidthMbps": res["bandwidthMbps"]}]}
    assert c.vo.count_groups(sid, pid, Layer.RAW) == 2
    assert code_of(c.ml.get_available_bandwidth, sid, "s", "s") is ErrorCode.PARAM_ERROR


def test_estimation_failure_keeps_raw_data(make):
    nodes = (SimNode("s", "10.8.0.1"), SimNode("d", "10.8.0.2"))
    # 1 Gbps path, the 100 Mbps sender's sweep tops out at 200 Mbps
    c = make(SimTopology(nodes, duplex("s", "d", 1.0, 1000.0)))
    sid = c.session()
    with pytest.raises(SonomaError) as e:
        c.ml.get_available_bandwidth(sid, "s", "d")
    assert e.value.code is ErrorCode.ESTIMATION_FAILED
    pid = re.search(r"process (\w+)", e.value.message).group(1)
    assert c.vo.count_groups(sid, pid, Layer.RAW) == 2
    assert c.ml.get_process_info(sid, pid)["state"] == "FAILED"


def test_capture_capability_checked(make):
    c = make(line_topology(2), capabilities={"n1": ["PING"]})
    sid = c.guest()
    assert code_of(c.ml.get_available_bandwidth, sid, "n0", "n1") is ErrorCode.CAPABILITY_MISSING


# -- topology and process management ------------------------------------------------


def test_topology_decomposition(cluster):
    ml = cluster.ml
    sid = cluster.session()
    h = ml.topology(sid, ["n0", "n2"])
    assert len(ml.process_handle(h["processId"]).tasks) == 2
    assert wait_terminal(ml, sid, h["processId"])["completedTasks"] == 2
    assert code_of(ml.topology, sid, ["n0"]) is ErrorCode.PARAM_ERROR
    assert code_of(ml.topology, sid, ["n0", "n0"]) is ErrorCode.PARAM_ERROR


def test_topology_node_quota(make):
    c = make(line_topology(3), quotas={"REGISTERED": {"maxRequestsPerMinute": 120, "maxNodesPerComposite": 2}})
    sid = c.session()
    assert code_of(c.ml.topology, sid, ["n0", "n1", "n2"]) is ErrorCode.QUOTA
    assert code_of(c.ml.ensemble_ping, sid, ["n0", "n1", "n2"], ["n0"]) is ErrorCode.QUOTA


def test_session_isolation(cluster):
    ml = cluster.ml
    a, b = cluster.session(), cluster.session()
    h = ml.long_ping(a, "n0", "n1", count=1)
    for fn in (ml.get_process_info, ml.get_results, ml.kill_process):
        assert code_of(fn, b, h["processId"]) is ErrorCode.UNKNOWN_PROCESS
    wait_terminal(ml, a, h["processId"])


def test_not_ready_then_results(make):
    c = make(line_topology(3), pacing_sec=0.1)
    sid = c.session(zip=True, fmt="XML")
    h = c.ml.long_ping(sid, "n0", "n2", count=5)
    assert code_of(c.ml.get_results, sid, h["processId"]) is ErrorCode.NOT_READY
    wait_terminal(c.ml, sid, h["processId"])
    res = c.ml.get_data(sid, h["processId"])
    assert res["zipped"] and res["format"] == "XML" and not res["partial"]
    assert len(parse_output(res["payload"], "XML", zip=True)) == 5
    raw = parse_output(c.ml.get_results(sid, h["processId"], raw=True)["payload"], "XML", zip=True)
    assert {r["taskId"] for r in raw} == set(c.ml.process_handle(h["processId"]).tasks)


def test_close_session_kills_running_process(make):
    c = make(line_topology(3), pacing_sec=0.2)
    sid = c.session()
    h = c.ml.long_ping(sid, "n0", "n2", count=20)
    time.sleep(0.3)
    c.ml.close_session(sid)
    assert c.ml.process_handle(h["processId"]).state.value == "KILLED"
    (tid,) = c.ml.process_handle(h["processId"]).tasks
    assert c.agents["n0"].task_state(tid).value == "KILLED"


def test_callbacks_idempotent_and_unknown(make):
    c = make(line_topology(3), notifier_factory=lambda url: (lambda tid: None))
    ml = c.ml
    sid = c.session()
    h = ml.parallel_ping(sid, "n0", ["n1", "n2"], count=1)
    tasks = ml.process_handle(h["processId"]).tasks
    for tid in tasks:
        while not agent_done(c.agents["n0"], tid):
            time.sleep(0.01)
    threads = [threading.Thread(target=ml.handle_callback, args=(tid,)) for tid in tasks for _ in range(5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ml.get_process_info(sid, h["processId"])["state"] == "FINISHED"
    assert c.vo.count_groups(sid, h["processId"], Layer.RAW) == 2
    assert code_of(ml.handle_callback, "no-such-task") is ErrorCode.UNKNOWN_TASK


def test_poll_fallback_without_callbacks(make):
    c = make(line_topology(3), notifier_factory=lambda url: (lambda tid: None))
    ml = c.ml
    sid = c.session()
    h = ml.long_ping(sid, "n0", "n1", count=1)
    time.sleep(0.3)
    assert ml.get_process_info(sid, h["processId"])["state"] == "RUNNING"
    real = ml.clock
    ml.clock = lambda: real() + 3600  # past the duration guess
    try:
        assert ml.get_process_info(sid, h["processId"])["state"] == "FINISHED"
    finally:
        ml.clock = real
