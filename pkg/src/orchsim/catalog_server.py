"""Loopback file server for integration-mode runs.

Serves a directory produced by `orchsim seed`: GET /files/<name>?section=<s>
returns that section's raw bytes, 404 for anything unknown. Handles
concurrent requests; meant for local tests, not the open internet.
"""

from __future__ import annotations

import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path


class _CatalogHandler(BaseHTTPRequestHandler):
    root: Path

    def do_GET(self):  # noqa: N802 (http.server API)
        parsed = urllib.parse.urlparse(self.path)
        parts = [p for p in parsed.path.split("/") if p]
        if len(parts) != 2 or parts[0] != "files":
            self._send(404, b"unknown path")
            return
        name = urllib.parse.unquote(parts[1])
        query = urllib.parse.parse_qs(parsed.query)
        section = query.get("section", [""])[0]
        file_dir = (self.root / "files" / name).resolve()
        if not str(file_dir).startswith(str((self.root / "files").resolve())):
            self._send(404, b"unknown file")
            return
        if not file_dir.is_dir():
            self._send(404, b"unknown file")
            return
        section_path = file_dir / section
        if not section or not section_path.is_file():
            self._send(404, b"unknown section")
            return
        content = section_path.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(len(content)))
        self.end_headers()
        self.wfile.write(content)

    def _send(self, code: int, body: bytes) -> None:
        self.send_response(code)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        pass  # keep test output quiet


def make_server(root: Path | str, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("Handler", (_CatalogHandler,), {"root": Path(root)})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(root: Path | str, host: str = "127.0.0.1", port: int = 8808) -> None:
    server = make_server(root, host, port)
    print(f"serving catalog from {root} on http://{host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
