import heapq
import math
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cogmap_nav.occupancy import GridConfig, new_grid

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def grid_from_strings(rows, resolution=1.0):
    """Tiny grid literal: '.' free, '#' obstacle, '?' unexplored. Row 0 is y = 0."""
    h, w = len(rows), len(rows[0])
    g = new_grid(GridConfig(w, h, resolution))
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch != "?":
                g.explored[y, x] = True
            if ch == "#":
                g.obstacle[y, x] = True
    return g


def dijkstra8(mask, goal, res=1.0):
    """Plain heapq Dijkstra on the 8-neighbour lattice; diagonals may not cut a blocked corner.

    ``goal`` is one (x, y) cell or a list of source cells.
    """
    h, w = mask.shape
    dist = np.full((h, w), np.inf)
    sources = [goal] if isinstance(goal, tuple) else list(goal)
    pq = []
    for gx, gy in sources:
        dist[gy, gx] = 0.0
        pq.append((0.0, int(gx), int(gy)))
    while pq:
        d, x, y = heapq.heappop(pq)
        if d > dist[y, x]:
            continue
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                nx, ny = x + dx, y + dy
                if (dx, dy) == (0, 0) or not (0 <= nx < w and 0 <= ny < h) or not mask[ny, nx]:
                    continue
                if dx and dy and not (mask[y, nx] and mask[ny, x]):
                    continue
                nd = d + (math.sqrt(2.0) if dx and dy else 1.0) * res
                if nd < dist[ny, nx]:
                    dist[ny, nx] = nd
                    heapq.heappush(pq, (nd, nx, ny))
    return dist


def random_grid(rng: np.random.Generator, w: int, h: int, p_explored=0.6, p_obstacle=0.15):
    g = new_grid(GridConfig(w, h, 0.05))
    g.explored[:] = rng.random((h, w)) < p_explored
    g.obstacle[:] = g.explored & (rng.random((h, w)) < p_obstacle)
    return g


class StubChatServer:
    """Local chat-completions stand-in. ``replies`` are served in order; each is
    a content string, a (status, body-bytes) tuple, or a callable(request_json)."""

    def __init__(self, replies=()):
        import http.server
        import json
        import threading

        self.replies = list(replies)
        self.requests = []
        self.headers = []
        self._lock = threading.Lock()
        stub = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub._lock:
                    stub.requests.append(body)
                    stub.headers.append(dict(self.headers))
                    reply = stub.replies.pop(0) if stub.replies else "Broad Search"
                if callable(reply):
                    reply = reply(body)
                if isinstance(reply, tuple):
                    status, data = reply
                else:
                    status = 200
                    data = json.dumps({"choices": [{"message": {"role": "assistant", "content": reply}}]}).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def make(replies=()):
        s = StubChatServer(replies)
        servers.append(s)
        return s
    yield make
    for s in servers:
        s.close()


ACCEPTANCE_LINES = []


def acceptance_line(number, title, ok, detail):
    """Record and print the single summary line of one acceptance criterion."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
