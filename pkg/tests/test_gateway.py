import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fical.errors import BackendRejected, BackendUnreachable, ConfigError, EmptyText
from fical.gateway import (
    ChatRequest,
    LLMSettings,
    MockEmbedder,
    MockGenerator,
    RemoteEmbedder,
    RemoteGenerator,
    generate,
    get_rule,
    mock_embedding,
    rule_names,
)

from oracles import trigram_embedding

# frozen from the standalone trigram oracle
DOG_DIM8 = [0.57735026919, 0.0, 0.0, -0.57735026919, 0.0, -0.57735026919, 0.0, 0.0]
HELLO_DIM8 = [1 / 3, -1 / 3, 1 / 3, 0.0, -1 / 3, 1 / 3, 0.0, -2 / 3]


def test_mock_embedding_frozen_values():
    assert np.allclose(mock_embedding("dog", 8), DOG_DIM8, atol=1e-11)
    assert np.allclose(mock_embedding("Hello, World_again", 8), HELLO_DIM8, atol=1e-12)


def test_tokenless_text_maps_to_first_axis():
    assert mock_embedding("!!!", 4).tolist() == [1.0, 0.0, 0.0, 0.0]


@settings(max_examples=60)
@given(st.text(max_size=40), st.integers(min_value=1, max_value=64))
def test_mock_embedding_matches_oracle(text, dim):
    assert np.allclose(mock_embedding(text, dim), trigram_embedding(text, dim), atol=1e-12)


def test_one_word_difference_lowers_similarity():
    e = MockEmbedder(64)
    a = e.embed("the quick brown fox").values
    b = e.embed("the quick brown cat").values
    # 0.81791288135197 by the oracle
    assert float(a @ b) == pytest.approx(0.81791288135197, abs=1e-12)
    assert float(a @ b) < 1.0


def test_embedder_is_deterministic_and_unit_length():
    e = MockEmbedder(32)
    v1, v2 = e.embed("Labrador retriever"), e.embed("Labrador retriever")
    assert v1 == v2 and hash(v1) == hash(v2)
    assert v1.norm == pytest.approx(1.0)
    with pytest.raises(EmptyText):
        e.embed("   ")


def test_mock_generator_is_pure():
    gen = MockGenerator("echo-instruction")
    req = ChatRequest("sys", "hello there", 0.0, 16, 3)
    assert generate(gen, req) == generate(gen, req)
    assert gen.calls == 2
    assert gen.fingerprint == "mock:echo-instruction"


def test_rules_are_registered():
    names = set(rule_names())
    assert {"compendium-writer", "keyword-agent", "judge-structural", "simulator-echo", "leaky-writer"} <= names
    with pytest.raises(ConfigError):
        get_rule("no-such-rule")


@pytest.mark.parametrize("kwargs", [{"temperature": 1.5}, {"temperature": -0.1}, {"max_tokens": 0}])
def test_chat_request_validation(kwargs):
    with pytest.raises(ValueError):
        ChatRequest("s", "u", **kwargs)


def test_request_digest_depends_on_every_field():
    base = ChatRequest("s", "u", 0.2, 10, 1)
    variants = [ChatRequest("s2", "u", 0.2, 10, 1), ChatRequest("s", "u", 0.3, 10, 1), ChatRequest("s", "u", 0.2, 10, 2)]
    assert all(v.digest() != base.digest() for v in variants)


# -- remote backends against a local stub --------------------------------------------------


class _Stub(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def log_message(self, *args):
        pass

    def do_POST(self):  # noqa: N802
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.path, body, self.headers.get("Authorization")))
        status, payload = type(self).script.pop(0) if type(self).script else (200, None)
        if payload is None:
            if self.path.endswith("/embeddings"):
                payload = {"data": [{"embedding": [3.0, 4.0]}]}
            else:
                payload = {"choices": [{"message": {"content": "ok:" + body["messages"][1]["content"]}}]}
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def stub():
    _Stub.script, _Stub.seen = [], []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Stub)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1", _Stub
    server.shutdown()
    server.server_close()


def test_remote_generator_round_trip(stub):
    url, handler = stub
    gen = RemoteGenerator(url, "m1", api_key="k", backoff=0)
    assert gen.generate(ChatRequest("s", "hi", 0.0, 5, 7)) == "ok:hi"
    path, body, auth = handler.seen[0]
    assert path == "/v1/chat/completions" and body["seed"] == 7 and body["model"] == "m1"
    assert auth == "Bearer k"
    assert gen.stats.requests == 1 and gen.stats.request_bytes > 0


def test_remote_generator_retries_server_errors(stub):
    url, handler = stub
    handler.script = [(503, {"error": "busy"}), (429, {"error": "slow down"})]
    gen = RemoteGenerator(url, "m", retries=3, backoff=0)
    assert gen.generate(ChatRequest("s", "x")) == "ok:x"
    assert len(handler.seen) == 3


def test_remote_generator_gives_up(stub):
    url, handler = stub
    handler.script = [(500, {})] * 3
    with pytest.raises(BackendRejected) as exc:
        RemoteGenerator(url, "m", retries=3, backoff=0).generate(ChatRequest("s", "x"))
    assert exc.value.status == 500


def test_client_errors_are_not_retried(stub):
    url, handler = stub
    handler.script = [(401, {"error": "bad key"})]
    with pytest.raises(BackendRejected) as exc:
        RemoteGenerator(url, "m", retries=3, backoff=0).generate(ChatRequest("s", "x"))
    assert exc.value.status == 401 and len(handler.seen) == 1


def test_remote_embedder_normalizes(stub):
    url, _ = stub
    v = RemoteEmbedder(url, "e", backoff=0).embed("text")
    assert v.values.tolist() == pytest.approx([0.6, 0.8])


def test_unreachable_backend():
    gen = RemoteGenerator("http://127.0.0.1:1", "m", retries=2, backoff=0, timeout=2)
    with pytest.raises(BackendUnreachable):
        gen.generate(ChatRequest("s", "x"))


def test_settings_choose_backends():
    s = LLMSettings()
    assert s.generator("agent").fingerprint == "mock:keyword-agent"
    assert isinstance(s.embedder(16), MockEmbedder)
    remote = LLMSettings(mode="remote", endpoint="http://x/v1", model="m")
    remote.validate()
    assert isinstance(remote.generator("judge"), RemoteGenerator)
    # no embedding endpoint configured: the mock embedder stays in place
    assert isinstance(remote.embedder(16), MockEmbedder)


def test_settings_read_environment():
    s = LLMSettings.from_env({"FICAL_LLM_ENDPOINT": "http://e", "FICAL_LLM_MODEL": "m", "FICAL_LLM_API_KEY": "k"})
    assert (s.endpoint, s.model, s.api_key) == ("http://e", "m", "k")
