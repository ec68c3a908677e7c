"""Loopback stub of a generation endpoint, for tests and offline demos.

Modes:
  - ``echo_features``: reply with the posted VIBE1 payload unchanged — the
    realized features equal the ideal decoded ones exactly.
  - ``fixed_image``: reply with one fixed PNG regardless of input, so every
    alpha realizes to the same re-encoded image.
"""

import contextlib
import io
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from feature_bridge.realize import VIBE_CONTENT_TYPE


def _fixed_png(size=64):
    y, x = np.mgrid[0:size, 0:size] / size
    rgb = np.stack([x, y, 0.5 * (x + y)], axis=-1)
    img = Image.fromarray((rgb * 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


@contextlib.contextmanager
def stub_endpoint(mode="echo_features"):
    """Serve the stub on an ephemeral port; yields its URL."""
    if mode not in ("echo_features", "fixed_image"):
        raise ValueError(f"unknown stub mode {mode!r}")
    png = _fixed_png()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
            if mode == "echo_features":
                payload, content_type = body, VIBE_CONTENT_TYPE
            else:
                payload, content_type = png, "image/png"
            self.send_response(200)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}/generate"
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)
