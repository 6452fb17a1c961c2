"""Precomputed POI vector index, top-k cosine scoring, an HTTP service and a
latency benchmark."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import nncore
from .errors import DataError, FormatError, RequestError
from .textrep import TextEncoder
from .towers import ModelParams, poi_forward, query_forward

log = logging.getLogger(__name__)

INDEX_MAGIC = b"DPSI"
INDEX_VERSION = 1
MAX_BODY = 64 * 1024
DEFAULT_K = 10


class PoiIndex:
    """POI ids (sorted) aligned with 32-bit vectors from one checkpoint."""

    def __init__(self, checkpoint_hash: str, ids, vectors):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        ids = list(ids)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise DataError(f"index has {len(ids)} ids but vectors of shape {vectors.shape}")
        if any(a >= b for a, b in zip(ids, ids[1:])):
            raise DataError("index ids must be unique and sorted")
        if len(bytes.fromhex(checkpoint_hash)) != 32:
            raise DataError("checkpoint hash must be 32 bytes of hex")
        self.checkpoint_hash = checkpoint_hash
        self.ids = ids
        self.vectors = vectors
        self.norms = nncore.kernels.row_norms(vectors)
        self.position = {pid: i for i, pid in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(INDEX_MAGIC)
        buf.write(struct.pack("<I", INDEX_VERSION))
        buf.write(bytes.fromhex(self.checkpoint_hash))
        buf.write(struct.pack("<II", len(self), self.dim))
        for pid, vec in zip(self.ids, self.vectors):
            raw = pid.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(vec.astype("<f4").tobytes())
        return buf.getvalue()

    def save(self, path) -> str:
        data = self.to_bytes()
        with open(path, "wb") as f:
            f.write(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes, source="<bytes>") -> "PoiIndex":
        view = memoryview(data)
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(view):
                raise FormatError(f"{source}: truncated index while reading {what}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4, "magic")) != INDEX_MAGIC:
            raise FormatError(f"{source}: not an index file (bad magic)")
        (version,) = struct.unpack("<I", take(4, "version"))
        if version != INDEX_VERSION:
            raise FormatError(f"{source}: unsupported index version {version}")
        ckpt = bytes(take(32, "checkpoint hash")).hex()
        count, dim = struct.unpack("<II", take(8, "header"))
        ids, vectors = [], np.empty((count, dim), dtype=np.float32)
        for i in range(count):
            (n,) = struct.unpack("<I", take(4, "id length"))
            try:
                ids.append(bytes(take(n, "id")).decode("utf-8"))
            except UnicodeDecodeError as e:
                raise FormatError(f"{source}: entry {i} id is not UTF-8") from e
            vectors[i] = np.frombuffer(take(4 * dim, "vector"), dtype="<f4")
        if pos != len(view):
            raise FormatError(f"{source}: {len(view) - pos} trailing bytes")
        if not np.all(np.isfinite(vectors)):
            raise FormatError(f"{source}: non-finite index vector")
        try:
            return cls(ckpt, ids, vectors)
        except DataError as e:
            raise FormatError(f"{source}: {e}") from e

    @classmethod
    def load(cls, path) -> "PoiIndex":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), str(path))


def _poi_vector(params, encoder, poi):
    nl, nw = encoder.encode(poi.name)
    al, aw = encoder.encode(poi.address)
    return poi_forward(nl, nw, al, aw, params)


def build_index(params: ModelParams, encoder: TextEncoder, poi_db, checkpoint_hash: str) -> PoiIndex:
    """One 32-bit poi_forward per POI, stored in poi_id order."""
    params = params.astype(np.float32)
    pois = sorted(poi_db, key=lambda p: p.poi_id)
    vectors = np.zeros((len(pois), params.config.out_dim), dtype=np.float32)
    for i, p in enumerate(pois):
        try:
            vectors[i] = _poi_vector(params, encoder, p)
        except (ValueError, IndexError) as e:
            raise DataError(f"cannot encode poi {p.poi_id}: {e}") from e
    return PoiIndex(checkpoint_hash, [p.poi_id for p in pois], vectors)


def audit_index(index: PoiIndex, params: ModelParams, encoder, poi_db, sample=32, seed=0) -> float:
    """Max abs difference between sampled index rows and fresh poi_forward outputs."""
    params = params.astype(np.float32)
    by_id = {p.poi_id: p for p in poi_db}
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(index), size=min(sample, len(index)), replace=False) if len(index) else []
    worst = 0.0
    for r in rows:
        fresh = _poi_vector(params, encoder, by_id[index.ids[r]])
        worst = max(worst, float(np.max(np.abs(fresh - index.vectors[r]))))
    return worst


@dataclass
class ScoreResponse:
    results: list                 # [(poi_id, score)], score descending
    model: str
    latency_us: int
    warning: str | None = None

    def to_dict(self):
        out = {"results": [{"poi_id": pid, "score": score} for pid, score in self.results],
               "model": self.model, "latency_us": self.latency_us}
        if self.warning:
            out["warning"] = self.warning
        return out


@dataclass(frozen=True)
class Snapshot:
    """Immutable serving state: 32-bit params, their encoder and index."""

    params: ModelParams
    encoder: TextEncoder
    index: PoiIndex

    @classmethod
    def create(cls, params, encoder, index):
        return cls(params.astype(np.float32), encoder, index)

    @property
    def model(self):
        return self.index.checkpoint_hash


def score_topk(query: str, k: int, snap: Snapshot, poi_ids=None, kern=None) -> ScoreResponse:
    """Top-k cosine matches of ``query`` over the index or a candidate subset."""
    t0 = time.perf_counter_ns()
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise RequestError("k must be an integer >= 1")
    kern = kern or nncore.kernels
    index = snap.index
    rows = None
    if poi_ids is not None:
        unknown = [pid for pid in poi_ids if pid not in index.position]
        if unknown:
            raise RequestError(f"unknown poi_ids: {', '.join(map(str, unknown[:10]))}")
        rows = np.array(sorted({index.position[pid] for pid in poi_ids}), dtype=np.int64)
    if len(index) == 0 or (rows is not None and rows.size == 0):
        return ScoreResponse([], snap.model, (time.perf_counter_ns() - t0) // 1000, warning="empty index")
    letters, words = snap.encoder.encode(query)
    q = query_forward(letters, words, snap.params, kern)
    scores = kern.cosine_scores(index.vectors, index.norms, q, rows)
    top = kern.topk(scores, k)
    pos = top if rows is None else rows[top]
    results = [(index.ids[p], float(scores[t])) for p, t in zip(pos, top)]
    return ScoreResponse(results, snap.model, (time.perf_counter_ns() - t0) // 1000)


class SnapshotHolder:
    """Shared reference to the live snapshot; ``swap`` replaces it atomically."""

    def __init__(self, snap: Snapshot):
        self._snap = snap
        self._lock = threading.Lock()

    def get(self) -> Snapshot:
        return self._snap

    def swap(self, snap: Snapshot) -> Snapshot:
        with self._lock:
            old, self._snap = self._snap, snap
        return old


def parse_request(body: bytes):
    """Validate a /score body into ``(query, poi_ids, k)``."""
    try:
        req = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise RequestError(f"malformed JSON: {e}") from e
    if not isinstance(req, dict) or not isinstance(req.get("query"), str):
        raise RequestError('body must be an object with a string "query"')
    poi_ids = req.get("poi_ids")
    if poi_ids is not None and (not isinstance(poi_ids, list) or not all(isinstance(p, str) for p in poi_ids)):
        raise RequestError('"poi_ids" must be a list of strings')
    k = req.get("k", DEFAULT_K)
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise RequestError('"k" must be an integer >= 1')
    return req["query"], poi_ids, k


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    holder: SnapshotHolder = None  # set per server class

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status, payload):
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/healthz":
            self._send(200, {"status": "ok", "model": self.holder.get().model})
        else:
            self._send(404, {"error": "not found"})

    def do_POST(self):
        if self.path != "/score":
            self._send(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = -1
        if length < 0:
            self._send(400, {"error": "bad Content-Length"})
            return
        if length > MAX_BODY:
            self.close_connection = True
            self._send(413, {"error": f"body exceeds {MAX_BODY} bytes"})
            return
        body = self.rfile.read(length)
        try:
            query, poi_ids, k = parse_request(body)
            resp = score_topk(query, k, self.holder.get(), poi_ids)
        except RequestError as e:
            self._send(400, {"error": str(e)})
            return
        self._send(200, resp.to_dict())


def make_server(holder: SnapshotHolder, host="127.0.0.1", port=8080) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"holder": holder})
    # the stdlib default backlog of 5 resets connections under bursts
    server_cls = type("Server", (ThreadingHTTPServer,), {"request_queue_size": 128})
    server = server_cls((host, port), handler)
    server.daemon_threads = True
    return server


def serve(snap: Snapshot, host="127.0.0.1", port=8080):
    """Run the scoring service until interrupted."""
    holder = SnapshotHolder(snap)
    server = make_server(holder, host, port)
    log.info("serving model %s on http://%s:%d", snap.model, *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return holder


@dataclass
class BenchReport:
    target_qps: float
    duration_s: float
    samples: list = field(default_factory=list)   # (ts_us, latency_us, ok)
    wall_s: float = 0.0

    @property
    def empty(self):
        return not self.samples

    def percentile_ms(self, q):
        ok = [lat for _, lat, good in self.samples if good]
        return float(np.percentile(ok, q)) / 1000 if ok else float("nan")

    @property
    def achieved_qps(self):
        return len(self.samples) / self.wall_s if self.wall_s > 0 else 0.0

    def summary(self):
        return {"target_qps": self.target_qps, "duration_s": self.duration_s,
                "requests": len(self.samples), "errors": sum(1 for s in self.samples if not s[2]),
                "achieved_qps": self.achieved_qps, "p50_ms": self.percentile_ms(50),
                "p95_ms": self.percentile_ms(95), "p99_ms": self.percentile_ms(99),
                "empty": self.empty}

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["ts_us", "latency_us", "ok"])
            w.writerows((ts, lat, int(ok)) for ts, lat, ok in self.samples)


def _url_caller(url, k, timeout):
    url = url.rstrip("/") + "/score"

    def call(query):
        data = json.dumps({"query": query, "k": k}).encode("utf-8")
        req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=timeout) as r:
                r.read()
                return r.status == 200
        except urllib.error.HTTPError:
            return False
    return call


def bench_latency(queries, target_qps, duration_s, snap: Snapshot | None = None, url=None,
                  k=DEFAULT_K, seed=0, timeout=5.0) -> BenchReport:
    """Open-loop load at ``target_qps``: requests are scheduled on a fixed
    clock, and latency counts from the scheduled send time, so a backlog shows
    up as queueing delay.

    In-process mode (``snap``) calls score_topk directly; URL mode posts to a
    running service and raises ConnectionError if it is unreachable.
    """
    if (snap is None) == (url is None):
        raise ValueError("give exactly one of snap or url")
    report = BenchReport(target_qps, duration_s)
    n = int(target_qps * duration_s) if target_qps > 0 else 0
    queries = list(queries)
    if n == 0 or not queries:
        return report
    if url is not None:
        try:
            with urllib.request.urlopen(url.rstrip("/") + "/healthz", timeout=timeout) as r:
                r.read()
        except (urllib.error.URLError, OSError) as e:
            raise ConnectionError(f"service at {url} is unreachable: {e}") from e
        call = _url_caller(url, k, timeout)
    else:
        def call(query):
            score_topk(query, k, snap)
            return True
    order = np.random.default_rng(seed).integers(0, len(queries), n)
    interval = 1.0 / target_qps
    start = time.perf_counter()
    for i, qi in enumerate(order):
        due = start + i * interval
        now = time.perf_counter()
        if now < due:
            time.sleep(due - now)
        try:
            ok = call(queries[qi])
        except (urllib.error.URLError, OSError, RequestError):
            ok = False
        done = time.perf_counter()
        report.samples.append((int((due - start) * 1e6), int((done - due) * 1e6), ok))
    report.wall_s = time.perf_counter() - start
    return report
