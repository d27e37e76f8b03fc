import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from entropy_ground.backends import (
    ChildProcessTransport,
    RemoteBackend,
    StubBackend,
    TcpTransport,
    ToyBackend,
    handle_request_line,
    make_backend,
    serve_tcp,
)
from entropy_ground.core import PixelRect, View
from entropy_ground.imaging import from_array
from entropy_ground.objectives import ObjectiveConfig
from entropy_ground.protocol import BackendUnavailable, ProtocolError
from entropy_ground.toy import ToyModel, ToyModelConfig, hash_prompt

PROMPT = "which item on the shelf is red"


def global_view(img):
    return (View(id="global", pixel_rect=img.rect, is_global=True, depth=0), img)


def random_image(seed, size=64):
    rng = np.random.default_rng(seed)
    return from_array(rng.integers(0, 256, size=(size, size), dtype=np.uint8))


class InProcessTransport:
    """Runs the serving loop function directly; no process, same bytes."""

    def __init__(self, backend):
        self.backend = backend

    def roundtrip(self, line: bytes) -> bytes:
        return handle_request_line(self.backend, line)

    def close(self):
        pass


class TestToyBackendAdapter:
    def test_matches_direct_saliency_call(self):
        config = ToyModelConfig(seed=3)
        img = random_image(3)
        backend = ToyBackend(config)
        [(grid, summary)] = backend.ground([global_view(img)], PROMPT, ObjectiveConfig())

        model = ToyModel(config)
        emb = model.embed_image(img)
        direct = model.saliency(emb, hash_prompt(PROMPT, config.vocab), ObjectiveConfig())
        np.testing.assert_array_equal(grid.scores, direct.saliency.scores)
        assert summary.entropy == direct.summary.entropy

    def test_answer_deterministic(self):
        backend = ToyBackend(ToyModelConfig(seed=4))
        img = random_image(4)
        a = backend.answer([global_view(img)], PROMPT)
        assert a == backend.answer([global_view(img)], PROMPT)
        assert a.isdigit()

    def test_ping(self):
        assert "toy" in ToyBackend(ToyModelConfig(seed=1)).ping()


class TestWireEquivalence:
    """The same backend must behave identically in-process and remotely."""

    def test_ground_identical_through_loopback(self):
        img = random_image(5)
        views = [global_view(img)]
        direct = StubBackend().ground(views, PROMPT, ObjectiveConfig())
        remote = RemoteBackend(InProcessTransport(StubBackend()))
        via_wire = remote.ground(views, PROMPT, ObjectiveConfig())
        for (g1, s1), (g2, s2) in zip(direct, via_wire):
            np.testing.assert_array_equal(g1.scores, g2.scores)
            assert g1.grid == g2.grid
            assert s1.entropy == s2.entropy
            assert s1.max_prob == s2.max_prob

    def test_toy_identical_through_child_process(self):
        img = random_image(6)
        views = [global_view(img)]
        direct = ToyBackend(ToyModelConfig(seed=11)).ground(views, PROMPT, ObjectiveConfig())
        remote = make_backend(
            f"cmd:{sys.executable} -m entropy_ground.serve --backend toy --seed 11",
            timeout=30.0,
        )
        try:
            via_wire = remote.ground(views, PROMPT, ObjectiveConfig())
            answer_direct = ToyBackend(ToyModelConfig(seed=11)).answer(views, PROMPT)
            answer_wire = remote.answer(views, PROMPT)
        finally:
            remote.close()
        for (g1, s1), (g2, s2) in zip(direct, via_wire):
            np.testing.assert_array_equal(g1.scores, g2.scores)
            assert s1.entropy == s2.entropy
        assert answer_direct == answer_wire

    def test_tcp_transport(self):
        ready = threading.Event()
        port = 39217
        thread = threading.Thread(
            target=serve_tcp,
            args=(StubBackend(), "127.0.0.1", port, ready),
            daemon=True,
        )
        thread.start()
        assert ready.wait(5.0)
        backend = make_backend(f"tcp:127.0.0.1:{port}", timeout=10.0)
        try:
            assert "stub" in backend.ping()
            img = random_image(7)
            [(grid, _)] = backend.ground([global_view(img)], PROMPT, ObjectiveConfig())
            assert grid.scores.shape == (64,)
        finally:
            backend.close()


class TestEchoServer:
    def test_engine_reconstructs_fixed_grid_exactly(self):
        """An echo server returning a canned grid comes back bit-exact."""
        fixed_scores = tuple(float(v) for v in np.linspace(0.0, 3.0, 64))

        class EchoTransport:
            def roundtrip(self, line):
                from entropy_ground.protocol import (
                    GridPayload, GroundResponse, decode, encode,
                )

                request = decode(line)
                return encode(
                    GroundResponse(
                        request_id=request.request_id,
                        grids=(
                            GridPayload(
                                rows=8, cols=8, scores=fixed_scores,
                                entropy=1.5, max_prob=0.25, vocab=64,
                            ),
                        ),
                    )
                )

            def close(self):
                pass

        img = random_image(50)
        [(grid, summary)] = RemoteBackend(EchoTransport()).ground(
            [global_view(img)], PROMPT, ObjectiveConfig()
        )
        assert tuple(float(s) for s in grid.scores) == fixed_scores
        assert summary.entropy == 1.5
        assert summary.max_prob == 0.25


class TestRemoteFailureModes:
    def test_error_response_raises_protocol_error(self):
        class Exploding(StubBackend):
            def ground(self, views, prompt, objective, tap_layer=None):
                raise RuntimeError("kaboom")

        remote = RemoteBackend(InProcessTransport(Exploding()))
        with pytest.raises(ProtocolError, match="kaboom"):
            remote.ground([global_view(random_image(8))], PROMPT, ObjectiveConfig())

    def test_dead_process_is_backend_unavailable(self):
        with pytest.raises(BackendUnavailable):
            transport = ChildProcessTransport([sys.executable, "-c", "pass"], timeout=5.0)
            time.sleep(0.3)
            transport.roundtrip(b'{"id":"1","op":"ping"}\n')

    def test_timeout_is_backend_unavailable(self):
        silent = (
            "import sys\n"
            "sys.stdin.readline()\n"
            "import time; time.sleep(60)\n"
        )
        transport = ChildProcessTransport([sys.executable, "-c", silent], timeout=0.5)
        try:
            with pytest.raises(BackendUnavailable, match="timed out"):
                transport.roundtrip(b'{"id":"1","op":"ping"}\n')
        finally:
            transport.proc.kill()

    def test_connection_refused(self):
        with pytest.raises(BackendUnavailable):
            TcpTransport("127.0.0.1", 9, timeout=2.0)

    def test_mismatched_response_id(self):
        class WrongId:
            def roundtrip(self, line):
                return b'{"id": "zzz", "op": "ping_response", "backend": "x"}\n'

            def close(self):
                pass

        with pytest.raises(ProtocolError, match="does not match"):
            RemoteBackend(WrongId()).ping()

    def test_unknown_spec(self):
        with pytest.raises(ValueError):
            make_backend("quantum")


class TestServerLoop:
    def test_bad_line_yields_error_response(self):
        out = handle_request_line(StubBackend(), b"this is not json\n")
        assert b'"op": "error"' in out or b'"error"' in out

    def test_server_survives_bad_request_then_serves(self):
        proc = subprocess.Popen(
            [sys.executable, "-m", "entropy_ground.serve", "--backend", "stub"],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )
        try:
            proc.stdin.write(b"garbage\n")
            proc.stdin.write(b'{"id":"2","op":"ping"}\n')
            proc.stdin.flush()
            first = proc.stdout.readline()
            second = proc.stdout.readline()
            assert b"error" in first
            assert b"ping_response" in second
        finally:
            proc.stdin.close()
            proc.wait(timeout=10)
