import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from streamgym.abr import FixedAbr, OracleAbr, RateAbr, algorithm_rng, run_session, session_seed
from streamgym.learn import PolicyAbr, init_model
from streamgym.qoe import QoEConfig, session_qoe
from streamgym.server import DecisionService, DriveError, RequestError, drive_session, start_background
from streamgym.sim import SimConfig, Variant, make_manifest

from conftest import random_trace

MANIFEST = make_manifest()


def request(session="s", last=None, n=0, buffer=0.0):
    body = {"session": session, "buffer_level_s": buffer, "last_chunk_bytes": None, "last_download_s": None,
            "last_rtprop_s": None, "next_chunk_sizes_bytes": [row[n] for row in MANIFEST.chunk_sizes],
            "remaining_chunks": MANIFEST.chunk_count - n}
    if last:
        body.update(last_chunk_bytes=last[0], last_download_s=last[1], last_rtprop_s=last[2])
    return body


@pytest.fixture
def live():
    services = []

    def start(algorithm, seed=0, **kw):
        svc = DecisionService(algorithm, MANIFEST, seed=seed, **kw)
        server, url = start_background(svc)
        services.append(server)
        return svc, url
    yield start
    for server in services:
        server.shutdown()
        server.server_close()


def post(url, body, raw=None):
    data = raw if raw is not None else json.dumps(body).encode()
    req = urllib.request.Request(url + "/v1/decision", data=data, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_fixed_always_answers_three():
    svc = DecisionService(FixedAbr(3), MANIFEST)
    for n in range(5):
        assert svc.handle_decision(request("a", (1000, 1.0, 0.08) if n else None, n)) == {"session": "a", "quality": 3}


def test_zero_policy_samples_valid_indices():
    model = init_model(MANIFEST, SimConfig(), zero=True)
    svc = DecisionService(PolicyAbr(model, greedy=False), MANIFEST, seed=4)
    picks = [svc.handle_decision(request(f"s{i}"))["quality"] for i in range(60)]
    assert set(picks) <= set(range(6)) and len(set(picks)) > 3
    again = DecisionService(PolicyAbr(model, greedy=False), MANIFEST, seed=4)
    assert picks == [again.handle_decision(request(f"s{i}"))["quality"] for i in range(60)]


@pytest.mark.parametrize("mutate", [
    lambda b: b.pop("session"),
    lambda b: b.update(session=""),
    lambda b: b.update(buffer_level_s=-1),
    lambda b: b.update(buffer_level_s="x"),
    lambda b: b.update(buffer_level_s=True),
    lambda b: b.update(last_chunk_bytes=10),
    lambda b: b.update(next_chunk_sizes_bytes=[1, 2]),
    lambda b: b.update(next_chunk_sizes_bytes=[1, 2, 3, 4, 5, -6]),
    lambda b: b.update(remaining_chunks=0),
])
def test_malformed_requests(mutate):
    body = request()
    mutate(body)
    with pytest.raises(RequestError):
        DecisionService(RateAbr(), MANIFEST).handle_decision(body)


def test_chunk_counter_bounded():
    svc = DecisionService(FixedAbr(0), MANIFEST)
    for n in range(MANIFEST.chunk_count):
        svc.handle_decision(request("x", None, n))
    with pytest.raises(RequestError, match="already"):
        svc.handle_decision(request("x"))


def test_sessions_are_isolated():
    svc = DecisionService(RateAbr(), MANIFEST)
    # session a sees fast downloads, session b none; b must not inherit a's history
    for n in range(4):
        svc.handle_decision(request("a", (3_000_000, 1.0, 0.08) if n else None, n))
    assert svc.handle_decision(request("b"))["quality"] == 0
    assert svc.handle_decision(request("a", (3_000_000, 1.0, 0.08), 4))["quality"] == 5


def test_idle_sessions_are_evicted():
    now = [0.0]
    svc = DecisionService(FixedAbr(1), MANIFEST, ttl=10, clock=lambda: now[0])
    svc.handle_decision(request("old"))
    now[0] = 5.0
    svc.handle_decision(request("new"))
    assert svc.session_count == 2
    now[0] = 12.0
    svc.handle_decision(request("new", (1000, 1.0, 0.08), 1))
    assert svc.session_count == 1


def test_oracle_cannot_be_served():
    with pytest.raises(ValueError):
        DecisionService(OracleAbr(), MANIFEST)


def test_http_routes(live):
    svc, url = live(FixedAbr(2))
    with urllib.request.urlopen(url + "/healthz", timeout=5) as resp:
        health = json.loads(resp.read())
    assert health["status"] == "ok" and health["model"] == svc.model_fingerprint and "version" in health
    assert post(url, request("h")) == (200, {"session": "h", "quality": 2})
    status, body = post(url, None, raw=b"{nope")
    assert status == 400 and "JSON" in body["error"]
    status, body = post(url, {"session": "h"})
    assert status == 400
    with pytest.raises(urllib.error.HTTPError) as info:
        urllib.request.urlopen(url + "/nothing", timeout=5)
    assert info.value.code == 404


def test_concurrent_sessions(live):
    svc, url = live(RateAbr())
    errors = []

    def client(i):
        try:
            for n in range(10):
                status, body = post(url, request(f"c{i}", (500_000 * (i + 1), 1.0, 0.08) if n else None, n))
                assert status == 200 and body["session"] == f"c{i}"
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)
    threads = [threading.Thread(target=client, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert svc.session_count == 8


def test_driven_session_matches_in_process(live):
    model = init_model(MANIFEST, SimConfig(), seed=2)
    alg = PolicyAbr(model, greedy=False)
    _, url = live(alg, seed=11)
    cfg = SimConfig(Variant.SIM_O)
    tr = random_trace(7)
    wire = drive_session(url, tr, MANIFEST, cfg, session_id="p1", seed=11, start_time=2.5)
    local = run_session(alg, tr, MANIFEST, cfg, np.random.default_rng(session_seed(11, "p1")),
                        algorithm_rng(11, "p1"), start_time=2.5)
    assert len(wire.steps) == MANIFEST.chunk_count
    assert wire.qualities == local.qualities
    assert wire.to_csv() == local.to_csv()
    assert session_qoe(wire.log(), QoEConfig.hd()) == session_qoe(local.log(), QoEConfig.hd())


def test_unreachable_endpoint_fails_at_chunk_zero():
    with pytest.raises(DriveError) as info:
        drive_session("http://127.0.0.1:9", random_trace(0), MANIFEST, SimConfig(), timeout=1)
    assert info.value.chunk == 0
