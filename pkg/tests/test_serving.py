import http.client
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsm import nncore
from dpsm.errors import DataError, FormatError, RequestError
from dpsm.serving import (
    MAX_BODY,
    BenchReport,
    PoiIndex,
    Snapshot,
    SnapshotHolder,
    audit_index,
    bench_latency,
    build_index,
    make_server,
    parse_request,
    score_topk,
)
from dpsm.towers import cosine_similarity, init_params, poi_forward, query_forward

HASH = "ab" * 32


@pytest.fixture(scope="module")
def snap(trained):
    index = build_index(trained.params, trained.encoder, trained.corpus.pois, HASH)
    return Snapshot.create(trained.params, trained.encoder, index)


@pytest.fixture(scope="module")
def server(snap):
    holder = SnapshotHolder(snap)
    srv = make_server(holder, "127.0.0.1", 0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv, holder
    srv.shutdown()
    srv.server_close()


def request(srv, method, path, body=None, headers=None):
    conn = http.client.HTTPConnection(*srv.server_address[:2], timeout=10)
    try:
        conn.request(method, path, body=body, headers=headers or {})
        resp = conn.getresponse()
        return resp.status, json.loads(resp.read())
    finally:
        conn.close()


class TestIndex:
    def test_shape(self, snap, trained):
        assert len(snap.index) == 300 and snap.index.dim == trained.config.out_dim
        assert snap.index.vectors.dtype == np.float32
        assert snap.index.ids == sorted(p.poi_id for p in trained.corpus.pois)

    def test_rebuild_byte_identical(self, snap, trained):
        again = build_index(trained.params, trained.encoder, trained.corpus.pois, HASH)
        assert again.to_bytes() == snap.index.to_bytes()

    def test_audit_exact(self, snap, trained):
        assert audit_index(snap.index, trained.params, trained.encoder, trained.corpus.pois, sample=64) == 0.0

    def test_file_round_trip(self, snap, tmp_path):
        h = snap.index.save(tmp_path / "i.dpsi")
        loaded = PoiIndex.load(tmp_path / "i.dpsi")
        assert loaded.save(tmp_path / "j.dpsi") == h
        assert loaded.ids == snap.index.ids and np.array_equal(loaded.vectors, snap.index.vectors)
        assert loaded.checkpoint_hash == HASH

    def test_layout(self):
        idx = PoiIndex(HASH, ["a"], np.array([[1.0, 2.0]]))
        data = idx.to_bytes()
        assert data[:4] == b"DPSI" and data[4:8] == (1).to_bytes(4, "little")
        assert data[8:40] == bytes.fromhex(HASH)
        assert data[40:48] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert data[48:53] == (1).to_bytes(4, "little") + b"a"
        assert np.frombuffer(data[53:], "<f4").tolist() == [1.0, 2.0]

    def test_every_truncation_rejected(self, snap):
        data = PoiIndex(HASH, snap.index.ids[:5], snap.index.vectors[:5]).to_bytes()
        for n in range(len(data)):
            with pytest.raises(FormatError):
                PoiIndex.from_bytes(data[:n])

    @pytest.mark.parametrize("mutate", [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:4] + (9).to_bytes(4, "little") + d[8:],
        lambda d: d + b"\x00",
        lambda d: d[:-4] + np.array([np.inf], "<f4").tobytes(),
    ])
    def test_corruption_rejected(self, mutate):
        data = PoiIndex(HASH, ["a", "b"], np.ones((2, 3))).to_bytes()
        with pytest.raises(FormatError):
            PoiIndex.from_bytes(mutate(data))

    def test_validation(self):
        with pytest.raises(DataError):
            PoiIndex(HASH, ["b", "a"], np.ones((2, 2)))
        with pytest.raises(DataError):
            PoiIndex(HASH, ["a"], np.ones((2, 2)))
        with pytest.raises(DataError):
            PoiIndex("abcd", ["a"], np.ones((1, 2)))


class TestScore:
    def test_sorted_and_clamped(self, snap):
        r = score_topk("kfc", 1000, snap)
        scores = [s for _, s in r.results]
        assert len(r.results) == len(snap.index)
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_singleton_candidate(self, snap, trained):
        pid = snap.index.ids[7]
        r = score_topk("甲", 5, snap, [pid])
        poi = next(p for p in trained.corpus.pois if p.poi_id == pid)
        enc, p32 = trained.encoder, snap.params
        qv = query_forward(*enc.encode("甲"), p32)
        pv = poi_forward(*enc.encode(poi.name), *enc.encode(poi.address), p32)
        assert [p for p, _ in r.results] == [pid]
        assert r.results[0][1] == pytest.approx(cosine_similarity(qv, pv), rel=1e-6)

    def test_equals_fresh_vectors(self, snap, trained):
        # index scores equal scoring against freshly computed 32-bit POI vectors
        enc, p32 = trained.encoder, snap.params
        by_id = {p.poi_id: p for p in trained.corpus.pois}
        fresh = np.stack([poi_forward(*enc.encode(by_id[i].name), *enc.encode(by_id[i].address), p32)
                          for i in snap.index.ids])
        fresh_snap = Snapshot.create(trained.params, enc, PoiIndex(HASH, snap.index.ids, fresh))
        for q in [c.query for c in trained.corpus.clicks[:20]]:
            assert score_topk(q, 10, snap).results == score_topk(q, 10, fresh_snap).results

    def test_unknown_candidate(self, snap):
        with pytest.raises(RequestError, match="nope"):
            score_topk("q", 3, snap, ["nope"])

    @pytest.mark.parametrize("k", [0, -1, 1.5, True])
    def test_bad_k(self, snap, k):
        with pytest.raises(RequestError):
            score_topk("q", k, snap)

    def test_empty_index(self, trained):
        empty = Snapshot.create(trained.params, trained.encoder,
                                PoiIndex(HASH, [], np.zeros((0, trained.config.out_dim))))
        r = score_topk("q", 3, empty)
        assert r.results == [] and r.warning == "empty index"
        assert r.to_dict()["warning"] == "empty index"

    def test_pure(self, snap):
        a, b = score_topk("甲乙", 10, snap), score_topk("甲乙", 10, snap)
        assert a.results == b.results and a.model == b.model == HASH

    def test_response_shape(self, snap):
        d = score_topk("甲乙", 2, snap).to_dict()
        assert set(d) == {"results", "model", "latency_us"}
        assert set(d["results"][0]) == {"poi_id", "score"} and isinstance(d["latency_us"], int)


class TestTopkOracle:
    @given(st.integers(0, 2**32 - 1), st.integers(1, 1200))
    @settings(max_examples=30, deadline=None)
    def test_against_full_sort(self, seed, k):
        rng = np.random.default_rng(seed)
        vecs = rng.random((1000, 16)).astype(np.float32)
        # a few exact duplicates force ties
        vecs[rng.integers(0, 1000, 20)] = vecs[0]
        ids = [f"p{i:04d}" for i in range(1000)]
        q = rng.random(16).astype(np.float32)
        for name in nncore.available_backends():
            kern = nncore.get_backend(name)
            scores = kern.cosine_scores(vecs, kern.row_norms(vecs), q)
            brute = sorted(range(1000), key=lambda i: (-scores[i], ids[i]))[:k]
            assert kern.topk(scores, k).tolist() == brute

    def test_score_topk_vs_brute_force(self, snap):
        q = "甲乙丙"
        full = score_topk(q, len(snap.index), snap).results
        brute = sorted(full, key=lambda r: (-r[1], r[0]))
        for k in (1, 5, 50):
            assert score_topk(q, k, snap).results == brute[:k]


class TestParse:
    @pytest.mark.parametrize("body", [b"{", b"[]", b'{"query": 3}', b'{"query": "a", "k": 0}',
                                      b'{"query": "a", "poi_ids": "p1"}', b'{"query": "a", "poi_ids": [1]}',
                                      b"\xff"])
    def test_rejects(self, body):
        with pytest.raises(RequestError):
            parse_request(body)

    def test_defaults(self):
        assert parse_request(b'{"query": "kfc"}') == ("kfc", None, 10)
        assert parse_request('{"query": "中", "poi_ids": ["a"], "k": 2}'.encode()) == ("中", ["a"], 2)


class TestHttp:
    def test_healthz(self, server):
        srv, _ = server
        status, body = request(srv, "GET", "/healthz")
        assert status == 200 and body["model"] == HASH

    def test_score(self, server, snap):
        srv, _ = server
        status, body = request(srv, "POST", "/score", json.dumps({"query": "甲乙", "k": 3}).encode())
        assert status == 200 and len(body["results"]) == 3
        assert [r["poi_id"] for r in body["results"]] == [p for p, _ in score_topk("甲乙", 3, snap).results]

    @pytest.mark.parametrize("body", [b"not json", b'{"query": "a", "k": "x"}', b'{"query": "a", "poi_ids": ["zz"]}'])
    def test_bad_request(self, server, body):
        status, payload = request(server[0], "POST", "/score", body)
        assert status == 400 and payload["error"]

    def test_oversized(self, server):
        body = json.dumps({"query": "a" * (MAX_BODY + 10)}).encode()
        status, _ = request(server[0], "POST", "/score", body)
        assert status == 413

    def test_not_found(self, server):
        assert request(server[0], "GET", "/nope")[0] == 404
        assert request(server[0], "POST", "/other", b"{}")[0] == 404

    def test_identical_requests(self, server):
        body = json.dumps({"query": "kfc", "k": 5}).encode()
        a = request(server[0], "POST", "/score", body)[1]
        b = request(server[0], "POST", "/score", body)[1]
        assert a["results"] == b["results"]

    def test_concurrent_burst(self, server):
        body = json.dumps({"query": "甲乙丙", "k": 10}).encode()
        with ThreadPoolExecutor(16) as ex:
            outs = list(ex.map(lambda _: request(server[0], "POST", "/score", body), range(100)))
        assert all(s == 200 for s, _ in outs)
        assert len({json.dumps(b["results"]) for _, b in outs}) == 1

    def test_hot_swap(self, server, snap, trained):
        srv, holder = server
        other = build_index(init_params(trained.config, seed=5), trained.encoder, trained.corpus.pois, "cd" * 32)
        new = Snapshot.create(init_params(trained.config, seed=5), trained.encoder, other)
        old = holder.swap(new)
        try:
            assert request(srv, "GET", "/healthz")[1]["model"] == "cd" * 32
        finally:
            holder.swap(old)
        assert request(srv, "GET", "/healthz")[1]["model"] == HASH

    def test_swap_never_torn(self, snap, trained):
        # every response pairs results with the model hash of one snapshot
        other_params = init_params(trained.config, seed=6)
        other = Snapshot.create(other_params, trained.encoder,
                                build_index(other_params, trained.encoder, trained.corpus.pois, "cd" * 32))
        expected = {s.model: score_topk("甲", 3, s).results for s in (snap, other)}
        holder = SnapshotHolder(snap)
        stop = threading.Event()

        def flipper():
            i = 0
            while not stop.is_set():
                holder.swap(other if i % 2 == 0 else snap)
                i += 1

        t = threading.Thread(target=flipper)
        t.start()
        try:
            for _ in range(200):
                r = score_topk("甲", 3, holder.get())
                assert r.results == expected[r.model]
        finally:
            stop.set()
            t.join()


class TestBench:
    def test_zero_qps(self, snap):
        r = bench_latency(["a"], 0, 5, snap=snap)
        assert r.empty and r.summary()["requests"] == 0 and r.summary()["empty"] is True

    def test_in_process(self, snap, tmp_path):
        r = bench_latency(["甲乙", "kfc"], 200, 0.5, snap=snap)
        s = r.summary()
        assert s["requests"] == 100 and s["errors"] == 0
        assert 0 < s["p50_ms"] <= s["p95_ms"] <= s["p99_ms"]
        r.write_csv(tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "ts_us,latency_us,ok" and len(lines) == 101

    def test_over_http(self, server):
        srv, _ = server
        url = "http://%s:%d" % srv.server_address[:2]
        r = bench_latency(["甲乙"], 50, 0.4, url=url)
        assert len(r.samples) == 20 and all(ok for _, _, ok in r.samples)

    def test_unreachable(self):
        with pytest.raises(ConnectionError):
            bench_latency(["a"], 10, 1, url="http://127.0.0.1:9", timeout=0.5)

    def test_mode_required(self, snap):
        with pytest.raises(ValueError):
            bench_latency(["a"], 10, 1)
        with pytest.raises(ValueError):
            bench_latency(["a"], 10, 1, snap=snap, url="http://x")

    def test_report_math(self):
        r = BenchReport(10, 1, [(0, 1000, True), (100, 3000, True), (200, 99000, False)], wall_s=0.5)
        assert r.percentile_ms(50) == 2.0 and r.achieved_qps == 6.0

    def test_scan_time_grows_with_index(self):
        # doubling the index cannot make a full scan cheaper: checked as a trend
        rng = np.random.default_rng(0)
        kern = nncore.kernels
        q = rng.random(128).astype(np.float32)
        times = []
        for n in (1_000, 10_000, 100_000):
            vecs = rng.random((n, 128)).astype(np.float32)
            norms = kern.row_norms(vecs)
            best = float("inf")
            for _ in range(7):
                t0 = time.perf_counter()
                kern.topk(kern.cosine_scores(vecs, norms, q), 10)
                best = min(best, time.perf_counter() - t0)
            times.append(best)
        assert times[0] < times[1] < times[2]
