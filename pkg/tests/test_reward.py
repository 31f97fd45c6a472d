import threading
import time

import pytest
from fastapi.testclient import TestClient

from beqkit.reward import RewardReason, RewardRequest, RewardResponse, RewardService, create_app
from beqkit.verifier import MockTable
from helpers import engine_for, stmt

TABLE = MockTable(aliases={"b + a = c": "a + b = c"})
GT = stmt("a + b = c", name="gt", header="import Mathlib")


def lean(prop: str) -> str:
    return f"```lean4\nimport Mathlib\n\ntheorem my_favorite_theorem : {prop} := by sorry\n```"


@pytest.fixture
def service():
    svc = RewardService(engine_for(TABLE, workers=2))
    yield svc
    svc.close()


@pytest.mark.parametrize(
    "raw, reward, reason",
    [
        (lean("b + a = c"), 1, RewardReason.EQUIVALENT),
        ("<think>hmm</think>" + lean("a + b = c"), 1, RewardReason.EQUIVALENT),
        (lean("a * b = c"), 0, RewardReason.NOT_EQUIVALENT),
        (lean("(a + b = c"), 0, RewardReason.SYNTAX_FAILURE),
        ("I could not do it.", 0, RewardReason.PARSE_FAILURE),
    ],
)
def test_reward_examples(service, raw, reward, reason):
    resp = service.compute_reward(RewardRequest(raw, GT))
    assert (resp.reward, resp.reason) == (reward, reason)
    assert resp.elapsed_ms >= 0


def test_response_invariant():
    with pytest.raises(ValueError):
        RewardResponse(1, RewardReason.TIMEOUT, 0)


def test_broken_ground_truth_gives_syntax_failure(service):
    bad = stmt("Nat.ceil_div 5 2 = 3", name="gt")
    assert service.compute_reward(RewardRequest(lean("1 = 1"), bad)).reason is RewardReason.SYNTAX_FAILURE


def test_batch_of_duplicates_computes_once(service):
    reqs = [RewardRequest(lean("b + a = c"), GT)] * 32
    out = service.compute_batch(reqs)
    assert [r.reward for r in out] == [1] * 32
    stats = service.stats()
    assert stats["computations"] == 1
    assert stats["cache_hits"] == 31 and stats["cache_misses"] == 1
    assert stats["requests"] == 32


def test_batch_preserves_order(service):
    raws = [lean("b + a = c"), "junk", lean("q = r"), lean("b + a = c"), "junk"]
    out = service.compute_batch([RewardRequest(r, GT) for r in raws])
    assert [o.reason for o in out] == [
        RewardReason.EQUIVALENT, RewardReason.PARSE_FAILURE, RewardReason.NOT_EQUIVALENT,
        RewardReason.EQUIVALENT, RewardReason.PARSE_FAILURE,
    ]


def test_concurrent_duplicates_share_one_computation():
    svc = RewardService(engine_for(MockTable(aliases=TABLE.aliases, delay_s=0.05), workers=2))
    results = []
    threads = [
        threading.Thread(target=lambda: results.append(svc.compute_reward(RewardRequest(lean("b + a = c"), GT))))
        for _ in range(16)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(results) == 16 and all(r.reward == 1 for r in results)
    assert svc.stats()["computations"] == 1
    svc.close()


def test_backend_outage_degrades_health(service):
    service.engine.verifier.mock.available = False
    resp = service.compute_reward(RewardRequest(lean("x = y"), GT))
    assert (resp.reward, resp.reason) == (0, RewardReason.TIMEOUT)
    assert not service.healthy() and service.stats()["degraded"]
    service.engine.verifier.mock.available = True
    # timeouts are not cached, so the retry recomputes and recovers
    assert service.compute_reward(RewardRequest(lean("x = y"), GT)).reason is RewardReason.NOT_EQUIVALENT
    assert service.healthy()


def test_slow_check_answers_within_deadline():
    svc = RewardService(engine_for(MockTable(slow_delay_s=3), timeout_s=2))
    start = time.monotonic()
    resp = svc.compute_reward(RewardRequest(lean("mock_slow = 1"), GT, timeout_s=1))
    assert resp.reason is RewardReason.TIMEOUT
    assert time.monotonic() - start < 1 + 2.0
    svc.close()


def test_load_is_queued_within_the_pool_bound():
    engine = engine_for(MockTable(delay_s=0.01), workers=2)
    svc = RewardService(engine)
    reqs = [RewardRequest(lean(f"v{i} = w{i}"), GT) for i in range(40)]
    out = svc.compute_batch(reqs)
    assert all(r.reason is RewardReason.NOT_EQUIVALENT for r in out)
    assert engine.verifier.mock.max_in_flight <= 2
    assert svc.stats()["in_flight"] == 0
    svc.close()


def test_http_endpoints(service):
    with TestClient(create_app(service)) as client:
        body = {"generated": lean("b + a = c"), "ground_truth": GT.body, "ground_truth_header": GT.header}
        r = client.post("/reward", json=body)
        assert r.status_code == 200 and r.json()["reward"] == 1 and r.json()["reason"] == "Equivalent"

        r = client.post("/reward/batch", json={"requests": [body, {**body, "generated": "nope"}]})
        assert [x["reason"] for x in r.json()["responses"]] == ["Equivalent", "ParseFailure"]

        assert client.post("/reward", json={**body, "ground_truth": "not a theorem"}).status_code == 422
        assert client.post("/reward", json={"generated": "x"}).status_code == 422
        assert client.post("/reward", json={**body, "timeout_s": 0}).status_code == 422

        assert client.get("/healthz").json() == {"status": "ok"}
        stats = client.get("/stats").json()
        assert stats["requests"] == 3 and stats["cache_hits"] >= 1
        assert {"latency_ms_p50", "latency_ms_p95", "cache_hit_rate", "in_flight"} <= set(stats)

        service.engine.verifier.mock.available = False
        client.post("/reward", json={**body, "generated": lean("k = l")})
        assert client.get("/healthz").json() == {"status": "degraded"}
        service.engine.verifier.mock.available = True
