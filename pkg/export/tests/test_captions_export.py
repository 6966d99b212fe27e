import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from cir_export.captions import CaptionExportError, export_captions


class _Handler(BaseHTTPRequestHandler):
    fail = False
    seen_prompts = []

    def do_POST(self):
        cls = type(self)
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        cls.seen_prompts.append(body["prompt"])
        if cls.fail:
            self.send_response(500)
            self.end_headers()
            return
        data = json.dumps({"caption": f"a picture of {body['image_ref']}"}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    _Handler.fail = False
    _Handler.seen_prompts = []
    yield f"http://127.0.0.1:{httpd.server_port}"
    httpd.shutdown()


def test_export_captions_writes_primary_schema(tmp_path, server):
    out = tmp_path / "captions.jsonl"
    fresh = export_captions([("img1", "a.png"), ("img2", "b.png")],
                            server, "dress", 5, out)
    assert fresh == 2
    records = [json.loads(l) for l in open(out)]
    assert records[0] == {"image_id": "img1", "caption": "a picture of a.png",
                          "provider": "http"}
    assert _Handler.seen_prompts[0] == \
        "Please briefly describe the dress in 5 words."


def test_export_captions_resumes_from_existing_file(tmp_path, server):
    out = tmp_path / "captions.jsonl"
    export_captions([("img1", "a.png")], server, "image", 10, out)
    _Handler.seen_prompts = []
    fresh = export_captions([("img1", "a.png"), ("img2", "b.png")],
                            server, "image", 10, out)
    assert fresh == 1
    assert len(_Handler.seen_prompts) == 1  # only the new image hit the wire
    records = [json.loads(l) for l in open(out)]
    assert [r["image_id"] for r in records] == ["img1", "img2"]


def test_export_captions_transport_failure(tmp_path, server):
    _Handler.fail = True
    with pytest.raises(CaptionExportError, match="failed"):
        export_captions([("img1", "a.png")], server, "image", 10,
                        tmp_path / "c.jsonl")
