"""NDCG@k ranking metrics, judged-dataset evaluation and the ablation ladder."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import JudgedQuery, load_judged, write_judged  # noqa: F401  (re-exported)
from .errors import DataError
from .features import EncodedTexts, PoiFeatures, query_batches
from .textrep import has_pinyin
from .towers import POI, QUERY, ModelConfig, ModelParams, tower_forward

DEFAULT_KS = (3, 10)


def ndcg_at_k(grades, k) -> float:
    """NDCG@k with gain ``2**g - 1`` and discount ``log2(i + 1)``.

    ``grades`` are listed in ranked order.  Returns 0.0 when every grade is
    zero (no ideal gain to normalise by).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    grades = list(grades)
    if any(g < 0 for g in grades):
        raise ValueError("grades must be non-negative")

    def dcg(gs):
        return sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(gs[:k]))

    ideal = dcg(sorted(grades, reverse=True))
    return dcg(grades) / ideal if ideal > 0 else 0.0


def rank_candidates(candidates, scores):
    """Order (poi_id, grade) pairs by score descending, poi_id ascending."""
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i][0]))
    return [candidates[i] for i in order]


@dataclass
class EvalReport:
    model: str
    ndcg: dict                       # "NDCG@3" -> mean
    n_queries: int
    slices: dict = field(default_factory=dict)   # slice -> {"n_queries", "NDCG@k"...}
    notes: str = ("click-derived grades carry location bias (users favour top-displayed "
                  "results); no bias correction is applied")

    def to_dict(self):
        return {"model": self.model, "n_queries": self.n_queries, **self.ndcg,
                "slices": self.slices, "notes": self.notes}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)


def _mean_ndcg(ranked, ks):
    return {f"NDCG@{k}": (float(np.mean([ndcg_at_k([g for _, g in r], k) for r in ranked]))
                          if ranked else 0.0) for k in ks}


def evaluate_ranked(judged, score_lists, ks=DEFAULT_KS, kinds=None, model="model") -> EvalReport:
    """Build a report from one score list per judged query (aligned with candidates)."""
    ranked, pinyin, kind_of = [], [], []
    for jq, scores in zip(judged, score_lists):
        ranked.append(rank_candidates(jq.candidates, [float(s) for s in scores]))
        pinyin.append(has_pinyin(jq.query))
        kind_of.append((kinds or {}).get(jq.query))
    report = EvalReport(model, _mean_ndcg(ranked, ks), len(ranked))
    groups = {"with_pinyin": [r for r, p in zip(ranked, pinyin) if p],
              "without_pinyin": [r for r, p in zip(ranked, pinyin) if not p]}
    for kind in sorted({k for k in kind_of if k is not None}):
        groups[f"kind:{kind}"] = [r for r, k2 in zip(ranked, kind_of) if k2 == kind]
    for name, rs in groups.items():
        report.slices[name] = {"n_queries": len(rs), **_mean_ndcg(rs, ks)}
    return report


def evaluate_scores(judged, scorer, ks=DEFAULT_KS, kinds=None, model="scorer") -> EvalReport:
    """Evaluate any ``scorer(query, poi_ids) -> scores`` on judged queries."""
    judged = list(judged)
    scores = [scorer(jq.query, [pid for pid, _ in jq.candidates]) for jq in judged]
    return evaluate_ranked(judged, scores, ks, kinds, model)


def _check_known(judged, pois: PoiFeatures):
    missing = sorted({pid for jq in judged for pid, _ in jq.candidates if pid not in pois.row})
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise DataError(f"{len(missing)} judged poi_ids are not in the POI database: {shown}")


def embed_pois(params: ModelParams, pois: PoiFeatures, rows, chunk=512):
    out = []
    rows = np.asarray(rows, dtype=np.int64)
    for s in range(0, rows.shape[0], chunk):
        vec, _ = tower_forward(params, POI, pois.batches(params.config, rows[s:s + chunk]))
        out.append(vec)
    return np.concatenate(out) if out else np.zeros((0, params.config.out_dim), dtype=params.dtype)


def embed_queries(params: ModelParams, texts, encoder, chunk=512):
    enc = EncodedTexts(list(texts), encoder)
    out = []
    for s in range(0, len(enc), chunk):
        rows = np.arange(s, min(s + chunk, len(enc)))
        vec, _ = tower_forward(params, QUERY, query_batches(params.config, enc, rows))
        out.append(vec)
    return np.concatenate(out) if out else np.zeros((0, params.config.out_dim), dtype=params.dtype)


def evaluate_dataset(params: ModelParams, judged, pois: PoiFeatures, encoder, ks=DEFAULT_KS,
                     kinds=None, model="model") -> EvalReport:
    """Mean NDCG@k of cosine rankings over judged queries (batched scoring)."""
    judged = list(judged)
    _check_known(judged, pois)
    rows = sorted({pois.row[pid] for jq in judged for pid, _ in jq.candidates})
    slot = {r: i for i, r in enumerate(rows)}
    pvec = embed_pois(params, pois, rows)
    qvec = embed_queries(params, [jq.query for jq in judged], encoder)
    pn = np.linalg.norm(pvec, axis=1)
    qn = np.linalg.norm(qvec, axis=1)
    scores = []
    for i, jq in enumerate(judged):
        idx = [slot[pois.row[pid]] for pid, _ in jq.candidates]
        scores.append((pvec[idx] @ qvec[i]) / (pn[idx] * qn[i]))
    return evaluate_ranked(judged, scores, ks, kinds, model)


ABLATION_LADDER = (
    ("DSSM-like (letters, no conv)", dict(use_convolution=False, use_word_granularity=False, use_address=False)),
    ("CDESM (letters + conv)", dict(use_convolution=True, use_word_granularity=False, use_address=False)),
    ("CDESM+WS (+words)", dict(use_convolution=True, use_word_granularity=True, use_address=False)),
    ("DPSM (+address)", dict(use_convolution=True, use_word_granularity=True, use_address=True)),
)

@dataclass
class AblationRow:
    name: str
    config: ModelConfig
    report: EvalReport
    untrained: EvalReport | None = None
    epoch_losses: list = field(default_factory=list)


def run_ablation(clicks, poi_db, judged, encoder, base_config: ModelConfig, train_config,
                 kinds=None, ks=DEFAULT_KS, ladder=ABLATION_LADDER, on_trained=None):
    """Train and evaluate each ladder configuration on identical data and seed."""
    from .training import train

    pois = PoiFeatures(poi_db, encoder)
    dataset = [(c.query, c.poi_id) for c in clicks]
    rows = []
    for name, flags in ladder:
        cfg = replace(base_config, **flags)
        result = train(dataset, pois, encoder, cfg, train_config)
        params32 = result.params.astype(np.float32)
        report = evaluate_dataset(params32, judged, pois, encoder, ks, kinds, model=name)
        rows.append(AblationRow(name, cfg, report, epoch_losses=result.epoch_losses))
        if on_trained is not None:
            on_trained(name, cfg, result)
    return rows


def format_table(rows, ks=DEFAULT_KS, slice_name=None) -> str:
    """Aligned text table: one row per model, one NDCG column per k."""
    def metrics(r):
        src = r.report.ndcg if slice_name is None else r.report.slices.get(slice_name, {})
        return [f"{src.get(f'NDCG@{k}', float('nan')):.4f}" for k in ks]

    header = ["Model"] + [f"NDCG@{k}" for k in ks]
    body = [[r.name] + metrics(r) for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    fmt = lambda line: " | ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                  for i, (c, w) in enumerate(zip(line, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(b) for b in body]) + "\n"
