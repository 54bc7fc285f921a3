from __future__ import annotations

import base64
import json
import urllib.error
import urllib.request

import pytest

from sonoma import rpc
from sonoma.management.server import OPERATIONS
from sonoma.model import ErrorCode, SonomaError
from sonoma.vo import parse_output

from support import wait_terminal


def api(cluster, op, **body):
    return rpc.request(f"{cluster.url}/api/{op}", body)


def api_error(cluster, op, **body):
    with pytest.raises(SonomaError) as e:
        api(cluster, op, **body)
    return e.value.code


def test_describe_lists_every_operation(cluster):
    desc = rpc.request(f"{cluster.url}/api/describe")
    assert desc["version"] == "0.1.0"
    names = [op["name"] for op in desc["operations"]]
    assert names == [op.name for op in OPERATIONS] and len(names) == 22
    ping = next(op for op in desc["operations"] if op["name"] == "shortPing")
    assert ping["params"][:3] == [{"name": "sessionId", "required": True},
                                  {"name": "sourceNode", "required": True},
                                  {"name": "target", "required": True}]
    assert {"name": "count", "required": False, "default": 3} in ping["params"]
    long_ops = {op["name"] for op in desc["operations"] if op["asynchronous"]}
    assert "longPing" in long_ops and "shortPing" not in long_ops


def test_round_trip_over_http(cluster):
    assert api(cluster, "getVersion") == "0.1.0"
    sid = api(cluster, "requestSession", user="alice", credential="secret", zipResults=True)
    res = api(cluster, "shortPing", sessionId=sid, sourceNode="n0", target="n1", count=2)
    assert len(res["result"]["rttMs"]) == 2
    h = api(cluster, "longPing", sessionId=sid, sourceNode="n0", target="n2", count=2)
    wait_terminal(cluster.ml, sid, h["processId"])
    data = api(cluster, "getResults", sessionId=sid, processId=h["processId"])
    assert data["payloadEncoding"] == "base64" and data["zipped"]
    rows = parse_output(base64.b64decode(data["payload"]), "CSV", zip=True)
    assert len(rows) == 2
    stored = rpc.request(f"{cluster.url}/admin/records?sessionId={sid}&processId={h['processId']}")
    (text,) = stored.values()
    assert [r["rttMs"] for r in json.loads(text)] == [float(r["rttMs"]) for r in rows]
    acc = rpc.request(f"{cluster.url}/admin/accounting")
    assert any(s["sessionId"] == sid for s in acc["sessions"])
    assert api(cluster, "closeSession", sessionId=sid) == {"acknowledged": True}


def test_http_errors(cluster):
    sid = cluster.session()
    assert api_error(cluster, "teleport") is ErrorCode.UNKNOWN_OPERATION
    assert api_error(cluster, "shortPing", sessionId=sid, sourceNode="n0") is ErrorCode.PARAM_ERROR
    assert api_error(cluster, "shortPing", sessionId=sid, sourceNode="n0", target="n1",
                     colour="red") is ErrorCode.PARAM_ERROR
    assert api_error(cluster, "shortPing", sessionId=sid, sourceNode="n0", target="n1",
                     count="many") is ErrorCode.PARAM_ERROR
    assert api_error(cluster, "getNodeList", sessionId="nope") is ErrorCode.UNKNOWN_SESSION
    guest = cluster.guest()
    assert api_error(cluster, "longPing", sessionId=guest, sourceNode="n0", target="n1") is \
        ErrorCode.ASYNC_FORBIDDEN
    with pytest.raises(SonomaError) as e:
        rpc.request(f"{cluster.url}/admin/records?sessionId={sid}")
    assert e.value.code is ErrorCode.PARAM_ERROR
    with pytest.raises(SonomaError) as e:
        rpc.request(f"{cluster.url}/admin/records?sessionId={sid}&processId=x&layer=COOKED")
    assert e.value.code is ErrorCode.PARAM_ERROR


def test_malformed_body_rejected(cluster):
    req = urllib.request.Request(f"{cluster.url}/api/getVersion", data=b"{not json", method="POST")
    with pytest.raises(urllib.error.HTTPError) as e:
        urllib.request.urlopen(req, timeout=5)
    assert e.value.code == 400
    assert json.loads(e.value.read())["error"]["code"] == "PARAM_ERROR"
    with pytest.raises(SonomaError) as err:
        rpc.request(f"{cluster.url}/api/getVersion", [1, 2])
    assert err.value.code is ErrorCode.PARAM_ERROR


def test_callback_endpoint(cluster):
    with pytest.raises(SonomaError) as e:
        rpc.request(f"{cluster.url}/callback", {"taskId": "nope"})
    assert e.value.code is ErrorCode.UNKNOWN_TASK
    with pytest.raises(SonomaError) as e:
        rpc.request(f"{cluster.url}/callback", {"task": "x"})
    assert e.value.code is ErrorCode.PARAM_ERROR
