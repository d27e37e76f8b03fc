import base64
import json

import numpy as np
import pytest

from vlm_bridge.config import BridgeConfig
from vlm_bridge.server import BridgeServer, decode_image


def inline_view(view_id="global", is_global=True, w=64, h=64, seed=0):
    rng = np.random.default_rng(seed)
    samples = rng.integers(0, 256, size=w * h, dtype=np.uint8)
    return {
        "view_id": view_id, "x": 0, "y": 0, "w": w, "h": h, "is_global": is_global,
        "image": {
            "width": w, "height": h, "format": "gray8",
            "data_b64": base64.b64encode(samples.tobytes()).decode("ascii"),
        },
    }


@pytest.fixture(scope="module")
def server():
    return BridgeServer(BridgeConfig(model="tiny:7"))


def roundtrip(server, payload: dict) -> dict:
    return json.loads(server.handle_line((json.dumps(payload) + "\n").encode()))


class TestServer:
    def test_ping(self, server):
        reply = roundtrip(server, {"id": "1", "op": "ping"})
        assert reply == {"id": "1", "op": "ping_response", "backend": server.model.describe()}

    def test_ground_response_schema(self, server):
        reply = roundtrip(
            server,
            {
                "id": "2", "op": "ground", "prompt": "what is top left",
                "objective": {"kind": "entropy", "mass": 0.9, "decode_step": 1},
                "views": [inline_view(), inline_view("crop1", False, 32, 32, 1)],
            },
        )
        assert reply["op"] == "ground_response"
        assert len(reply["grids"]) == 2
        for grid in reply["grids"]:
            assert grid["rows"] * grid["cols"] == len(grid["scores"])
            assert all(s >= 0 for s in grid["scores"])
            assert 0 < grid["max_prob"] <= 1

    def test_ground_validates_against_engine_decoder(self, server):
        engine_protocol = pytest.importorskip("entropy_ground.protocol")
        line = server.handle_line(
            (
                json.dumps(
                    {
                        "id": "3", "op": "ground", "prompt": "probe",
                        "objective": {"kind": "top_p_entropy", "mass": 0.9, "decode_step": 2},
                        "views": [inline_view()],
                    }
                )
                + "\n"
            ).encode()
        )
        message = engine_protocol.decode(line)  # raises ProtocolError on any violation
        assert isinstance(message, engine_protocol.GroundResponse)

    def test_answer(self, server):
        reply = roundtrip(
            server,
            {"id": "4", "op": "answer", "prompt": "what colour", "views": [inline_view()]},
        )
        assert reply["op"] == "answer_response"
        assert reply["answer"]

    def test_unknown_op_is_error_and_server_survives(self, server):
        reply = roundtrip(server, {"id": "5", "op": "train"})
        assert reply["op"] == "error"
        assert "train" in reply["message"]
        assert roundtrip(server, {"id": "6", "op": "ping"})["op"] == "ping_response"

    def test_bad_json_is_error(self, server):
        reply = json.loads(server.handle_line(b"{{{\n"))
        assert reply["op"] == "error"

    def test_model_failure_reported_in_band(self, server):
        reply = roundtrip(
            server,
            {
                "id": "7", "op": "ground", "prompt": "p",
                "objective": {"kind": "entropy", "mass": 0.9, "decode_step": 1},
                "tap_layer": 99,
                "views": [inline_view()],
            },
        )
        assert reply["op"] == "error"
        assert "tap_layer" in reply["message"]

    def test_prompt_template_applied(self):
        server = BridgeServer(BridgeConfig(model="tiny:1", prompt_template="open"))
        seen = {}
        original = server.model.answer

        def spy(images, prompt, max_tokens):
            seen["prompt"] = prompt
            return original(images, prompt, max_tokens)

        server.model.answer = spy
        roundtrip(server, {"id": "8", "op": "answer", "prompt": "Is it red?",
                           "views": [inline_view()]})
        assert seen["prompt"].endswith("Answer the question using a single word or phrase.")


class TestImagePayload:
    def test_inline_gray(self):
        img = decode_image(inline_view()["image"])
        assert img.shape == (64, 64, 1)

    def test_inline_rgb(self):
        rng = np.random.default_rng(1)
        samples = rng.integers(0, 256, size=4 * 3 * 3, dtype=np.uint8)
        rec = {"width": 4, "height": 3, "format": "rgb8",
               "data_b64": base64.b64encode(samples.tobytes()).decode("ascii")}
        assert decode_image(rec).shape == (3, 4, 3)

    def test_path_pgm(self, tmp_path):
        samples = bytes(range(16))
        (tmp_path / "x.pgm").write_bytes(b"P5\n4 4\n255\n" + samples)
        rec = {"width": 4, "height": 4, "format": "gray8", "path": str(tmp_path / "x.pgm")}
        img = decode_image(rec)
        assert img.ravel().tolist() == list(range(16))

    def test_size_mismatch_rejected(self):
        rec = {"width": 8, "height": 8, "format": "gray8",
               "data_b64": base64.b64encode(bytes(7)).decode("ascii")}
        with pytest.raises(Exception, match="samples"):
            decode_image(rec)
