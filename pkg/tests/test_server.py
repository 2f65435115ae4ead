import httpx
import pytest

from fical.errors import DuplicateClient, NotAggregated, UploadRejected
from fical.federation import FederatedClient, GlobalCompendium, HttpTransport, run_round
from fical.server import make_server, serve_in_background

from test_federation import comp, fixed_clock


@pytest.fixture
def server():
    srv = make_server(["c1", "c2", "c3"])
    serve_in_background(srv)
    yield srv
    srv.shutdown()
    srv.server_close()


def test_status_then_barrier(server):
    t = HttpTransport(server.url)
    assert t.status() == {"registered": 3, "received": 0, "state": "collecting"}
    t.upload("c1", comp("c1").to_bytes())
    with pytest.raises(NotAggregated):
        t.fetch_global("c1")
    with pytest.raises(DuplicateClient):
        t.upload("c1", comp("c1").to_bytes())
    t.upload("c2", comp("c2").to_bytes())
    t.upload("c3", comp("c3").to_bytes())
    assert t.status()["state"] == "aggregated"
    g = GlobalCompendium.from_bytes(t.fetch_global("c2"))
    assert g.client_order == ("c1", "c2", "c3")
    t.close()


def test_raw_status_codes(server):
    with httpx.Client(base_url=server.url) as http:
        assert http.get("/v1/global").status_code == 409
        assert http.get("/nope").status_code == 404
        assert http.post("/v1/compendium", content=b"junk").status_code == 422
        ok = http.post("/v1/compendium", content=comp("c1").to_bytes())
        assert ok.status_code == 200 and ok.json()["received"] == 1
        assert http.post("/v1/compendium", content=comp("c1").to_bytes()).status_code == 409


def test_mismatched_header_rejected(server):
    t = HttpTransport(server.url)
    with pytest.raises(UploadRejected):
        t.upload("c2", comp("c1").to_bytes())
    t.close()


def test_full_round_over_http(server):
    clients = [FederatedClient(c, comp(c)) for c in ("c3", "c1", "c2")]
    t = HttpTransport(server.url)
    g, ledger = run_round(clients, t, deadline=10, clock=fixed_clock)
    t.close()
    assert len(ledger.entries) == 6 and ledger.is_complete_round(["c1", "c2", "c3"])
    assert server.federation.aggregations == 1
    assert g.to_bytes() == server.federation.global_bytes()
