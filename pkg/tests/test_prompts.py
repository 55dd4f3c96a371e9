import base64
import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from priorsr.core import write_png
from priorsr.degrade import (DegradationRanges, NoiseParams, identity_record, sample_record)
from priorsr.prompts import (DISTORTION_WORDS, HIGH_INSTRUCTION, LOW_INSTRUCTION, EmptyResponse, MLLMHttpError,
                             MLLMTimeout, TextEncoder, active_degradations, encode_text, mllm_describe,
                             negative_prompt, read_cache, stub_describe, tokenize, write_cache)

GOLDEN = Path(__file__).parent / "data" / "tokenizer_golden.json"


# ---------------------------------------------------------------------------
# stub provider


def test_stub_identity_is_clear():
    pair = stub_describe(identity_record(), ["red circle"])
    assert "clear" in pair.low_text
    assert pair.high_text == "a picture of red circle"
    assert pair.provenance == "stub"


def test_stub_heavy_noise_mentions_noise():
    rec = identity_record()
    rec.stage1.noise = NoiseParams("gaussian", 25 / 255)
    assert "noise" in stub_describe(rec).low_text


def test_stub_deterministic():
    rec = sample_record(DegradationRanges(), 4)
    assert stub_describe(rec, ["a", "b"]) == stub_describe(rec, ["a", "b"])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_stub_never_names_absent_distortions(seed):
    rec = sample_record(DegradationRanges(sinc_enabled=True), seed)
    words = set(re.findall(r"[a-z]+", stub_describe(rec).low_text))
    active = active_degradations(rec)
    for family, vocab in DISTORTION_WORDS.items():
        if family not in active:
            assert not words & set(vocab), (family, words)
    assert stub_describe(rec).low_text and stub_describe(rec).high_text


# ---------------------------------------------------------------------------
# negative prompt


def test_negative_prompt_exact():
    assert negative_prompt() == "blurry, dotted, noise, unclear, low-res, over-smoothed"
    assert negative_prompt() == negative_prompt()


# ---------------------------------------------------------------------------
# tokenizer / encoder


def test_tokenizer_golden():
    golden = json.loads(GOLDEN.read_text())
    for text, ids in golden.items():
        assert tokenize(text) == ids, text


def test_tokenizer_basics():
    assert tokenize("") == [0] * 77
    assert tokenize("Blurry, NOISE") == tokenize("blurry noise")
    assert len(tokenize("word " * 500)) == 77


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return TextEncoder().eval()


def test_encode_shapes(encoder):
    assert encode_text("", encoder).shape == (77, 64)
    assert encode_text(negative_prompt(), encoder).shape == (77, 64)


def test_encode_deterministic(encoder):
    with torch.no_grad():
        a = encode_text("a red circle", encoder)
        b = encode_text("a red circle", encoder)
    assert torch.equal(a, b)


def test_one_token_difference_changes_sequence(encoder):
    pairs = [("a red circle", "a blue circle"), ("heavy noise", "heavy blur"), ("one", "two")]
    for x, y in pairs:
        ix, iy = tokenize(x), tokenize(y)
        differing = [i for i, (p, q) in enumerate(zip(ix, iy)) if p != q]
        assert len(differing) == 1
        with torch.no_grad():
            ex, ey = encode_text(x, encoder), encode_text(y, encoder)
        assert (ex - ey).abs().amax(dim=-1).gt(0).sum() >= 1


def test_long_text_finite(encoder):
    text = "".join(chr(0x61 + (i * 7) % 26) + (" " if i % 5 == 0 else "") for i in range(10_000))
    with torch.no_grad():
        out = encode_text(text, encoder)
    assert out.shape == (77, 64) and torch.isfinite(out).all()


# ---------------------------------------------------------------------------
# MLLM client


class _Handler(BaseHTTPRequestHandler):
    mode = "echo"
    received: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).received.append(body)
        if self.mode == "sleep":
            time.sleep(2.0)
        if self.mode == "http500":
            self.send_response(500)
            self.end_headers()
            return
        text = "" if self.mode == "empty" else f"payload for: {body['instruction']}"
        data = json.dumps({"text": text}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.received = []
    _Handler.mode = "echo"
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    srv.daemon_threads = True
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/describe"
    srv.shutdown()
    srv.server_close()


@pytest.fixture
def image(tmp_path):
    p = tmp_path / "img.png"
    write_png(p, np.zeros((8, 8, 3), np.uint8))
    return p


def test_mllm_high_instruction_verbatim(server, image):
    text = mllm_describe(image, "high", server)
    assert text == f"payload for: {HIGH_INSTRUCTION}"
    req = _Handler.received[-1]
    assert req["instruction"] == "Please provide a descriptive summary of the content of this image"
    assert base64.b64decode(req["image"]) == image.read_bytes()
    assert isinstance(req["max_tokens"], int)


def test_mllm_low_instruction_verbatim(server, image):
    mllm_describe(image, "low", server)
    assert _Handler.received[-1]["instruction"] == LOW_INSTRUCTION
    assert LOW_INSTRUCTION == ("Please describe the quality of this image and evaluate it based on factors such "
                               "as clarity, color, noise, and lighting")


def test_mllm_env_endpoint(server, image, monkeypatch):
    monkeypatch.setenv("PRIORSR_MLLM_URL", server)
    assert mllm_describe(image, "high").startswith("payload for")


def test_mllm_errors(server, image):
    _Handler.mode = "empty"
    with pytest.raises(EmptyResponse):
        mllm_describe(image, "high", server)
    _Handler.mode = "http500"
    with pytest.raises(MLLMHttpError):
        mllm_describe(image, "high", server)
    _Handler.mode = "sleep"
    t0 = time.monotonic()
    with pytest.raises(MLLMTimeout):
        mllm_describe(image, "high", server, timeout=0.3)
    assert time.monotonic() - t0 < 1.5


def test_mllm_unreachable(image):
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    t0 = time.monotonic()
    with pytest.raises(MLLMTimeout):
        mllm_describe(image, "low", f"http://127.0.0.1:{port}/", timeout=0.5)
    assert time.monotonic() - t0 < 1.5


def test_prompt_cache_roundtrip(image):
    pair = stub_describe(identity_record(), ["x"])
    write_cache(image, pair)
    assert read_cache(image) == pair
    assert json.loads((image.parent / "img.prompts.json").read_text())["provenance"] == "stub"
