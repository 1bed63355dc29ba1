import json
import urllib.error
import urllib.request

import pytest

from freshrec.http_api import serve_in_thread
from freshrec.slate_service import SlateService

from test_slate_service import T0, world  # noqa: F401  (module-scoped fixture)


@pytest.fixture()
def api(world):  # noqa: F811
    cat, bundle = world
    svc = SlateService(cat, bundle, editorial_anchor=T0)
    svc.scheduler_tick(T0)
    server, thread = serve_in_thread(svc, clock=lambda: T0 + 60)
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base, svc
    server.shutdown()
    server.server_close()


def call(url, body=None):
    data = None if body is None else (body if isinstance(body, bytes) else json.dumps(body).encode())
    req = urllib.request.Request(url, data=data, method="POST" if data is not None else "GET")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            raw = resp.read()
            return resp.status, json.loads(raw) if raw else None
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read() or b"null")


def test_carousel_and_feedback_round_trip(api):
    base, svc = api
    status, slate = call(f"{base}/v1/carousel?user=u001&policy=TsColdStart")
    assert status == 200
    assert [e["position"] for e in slate["entries"]] == list(range(1, len(slate["entries"]) + 1))
    assert slate["policy"] == "TsColdStart" and slate["created_at"] == T0 + 60
    status, body = call(f"{base}/v1/feedback", {"slate_id": slate["slate_id"], "click_position": 1})
    assert (status, body) == (204, None)
    status, body = call(f"{base}/v1/feedback", {"slate_id": slate["slate_id"]})
    assert status == 404 and "unknown slate" in body["error"]


def test_view_all_and_explicit_now(api):
    base, _ = api
    status, slate = call(f"{base}/v1/view-all?user=u002&policy=ColdStart&now={T0 + 5}")
    assert status == 200 and len(slate["entries"]) <= 100 and slate["created_at"] == T0 + 5


@pytest.mark.parametrize("path", [
    "/v1/carousel?policy=ColdStart",
    "/v1/carousel?user=u1&policy=Bogus",
    "/v1/carousel?user=u1&now=abc",
])
def test_bad_queries(api, path):
    base, _ = api
    assert call(base + path)[0] == 400


@pytest.mark.parametrize("body", [b"not json", {"click_position": 1}, {"slate_id": "s", "click_position": "2"},
                                  {"slate_id": "s", "click_position": True}])
def test_bad_feedback(api, body):
    base, _ = api
    assert call(f"{base}/v1/feedback", body)[0] == 400


def test_out_of_range_click(api):
    base, _ = api
    _, slate = call(f"{base}/v1/carousel?user=u003&policy=ColdStart")
    status, _ = call(f"{base}/v1/feedback", {"slate_id": slate["slate_id"], "click_position": 99})
    assert status == 400
    assert call(f"{base}/v1/feedback", {"slate_id": slate["slate_id"], "click_position": None})[0] == 204


def test_health_and_unknown_route(api):
    base, _ = api
    status, health = call(f"{base}/v1/health")
    assert status == 200 and health["status"] == "ok" and health["serving_version"] == 1
    assert call(f"{base}/v2/nothing")[0] == 404
