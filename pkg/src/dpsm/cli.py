"""``dpsm`` command line: one subcommand per workflow step.

Every subcommand takes ``--seed`` and ``--config <json>``; values from the
JSON file are overridden by flags given on the command line.  Each run
writes ``<command>.manifest.json`` beside its outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

from . import __version__
from .errors import ConfigError, DataError, NumericError, RequestError, SamplingError

log = logging.getLogger("dpsm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_KEYS = ("embed_dim", "conv_window", "conv_channels", "hidden_dim", "out_dim", "activation",
              "max_letters", "max_words", "use_word_granularity", "use_address", "use_convolution")
TRAIN_KEYS = ("gamma", "negatives", "learning_rate", "batch_size", "epochs", "popularity_exponent",
              "optimizer")

DEFAULTS = {
    "common": {"seed": 0},
    "gen": {"pois": 2000, "queries": 20000, "out": "data"},
    "vocab": {"letter_cap": 1000, "word_cap": 4000, "clicks": None, "out": None},
    "model": {"embed_dim": 32, "conv_window": 2, "conv_channels": 64, "hidden_dim": 64,
              "out_dim": 32, "activation": "relu", "max_letters": 32, "max_words": 16,
              "use_word_granularity": True, "use_address": True, "use_convolution": True},
    "train": {"gamma": 20.0, "negatives": 4, "learning_rate": 3e-3, "batch_size": 64, "epochs": 5,
              "popularity_exponent": 0.5, "optimizer": "adam"},
    "eval": {"k": [3, 10], "pois": None, "vocab": None, "kinds": None, "out": None},
    "serve": {"host": "127.0.0.1", "port": 8080},
    "bench": {"qps": 1000.0, "duration": 30.0, "k": 10, "url": None, "out": None},
    "trace": {"top_k": 8},
}


PATH_DEFAULTS = {"train": {"out": "model"}, "ablate": {"out": "ablation", "kinds": None}}
PATH_KEYS = {"out", "pois", "clicks", "judged", "vocab", "ckpt", "index", "kinds", "queries", "url"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _opt(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def _model_flags(p):
    _opt(p, "--embed-dim", dest="embed_dim", type=int)
    _opt(p, "--conv-window", dest="conv_window", type=int)
    _opt(p, "--channels", dest="conv_channels", type=int)
    _opt(p, "--hidden", dest="hidden_dim", type=int)
    _opt(p, "--out-dim", dest="out_dim", type=int)
    _opt(p, "--activation", choices=("relu", "tanh"))
    _opt(p, "--max-letters", dest="max_letters", type=int)
    _opt(p, "--max-words", dest="max_words", type=int)
    _opt(p, "--words", dest="use_word_granularity", type=_bool, metavar="BOOL")
    _opt(p, "--address", dest="use_address", type=_bool, metavar="BOOL")
    _opt(p, "--conv", dest="use_convolution", type=_bool, metavar="BOOL")


def _train_flags(p):
    _opt(p, "--gamma", type=float)
    _opt(p, "--negatives", type=int)
    _opt(p, "--lr", dest="learning_rate", type=float)
    _opt(p, "--batch-size", dest="batch_size", type=int)
    _opt(p, "--epochs", type=int)
    _opt(p, "--alpha", dest="popularity_exponent", type=float)
    _opt(p, "--optimizer", choices=("adam", "sgd"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpsm", description="Two-tower POI semantic matching engine.")
    parser.add_argument("--version", action="version", version=f"dpsm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        _opt(p, "--seed", type=int)
        _opt(p, "--config", help="JSON file of option values (flags win)")
        return p

    p = command("gen", "write a seeded synthetic corpus")
    _opt(p, "--pois", type=int)
    _opt(p, "--queries", type=int)
    _opt(p, "-o", "--out")

    p = command("vocab", "build the shared letter/word vocabulary")
    _opt(p, "--pois", required=False)
    _opt(p, "--clicks")
    _opt(p, "--letter-cap", dest="letter_cap", type=int)
    _opt(p, "--word-cap", dest="word_cap", type=int)
    _opt(p, "-o", "--out")

    p = command("train", "train a model on a click log")
    for f in ("--pois", "--clicks", "--vocab"):
        _opt(p, f)
    _opt(p, "-o", "--out")
    _model_flags(p)
    _train_flags(p)

    p = command("eval", "NDCG@k of a checkpoint on judged queries")
    _opt(p, "--ckpt")
    _opt(p, "--judged")
    _opt(p, "--pois", help="default: pois.tsv beside the judged file")
    _opt(p, "--vocab", help="default: vocab.txt beside the checkpoint")
    _opt(p, "--kinds", help="query kind file for per-kind slices")
    _opt(p, "--k", type=int, nargs="+")
    _opt(p, "-o", "--out")

    p = command("ablate", "train and evaluate the feature-flag ladder")
    for f in ("--pois", "--clicks", "--judged", "--vocab", "--kinds"):
        _opt(p, f)
    _opt(p, "-o", "--out")
    _model_flags(p)
    _train_flags(p)

    p = command("index", "precompute POI vectors into an index file")
    for f in ("--ckpt", "--pois", "--vocab"):
        _opt(p, f)
    _opt(p, "-o", "--out")

    p = command("serve", "HTTP scoring service")
    for f in ("--ckpt", "--index", "--vocab"):
        _opt(p, f)
    _opt(p, "--host")
    _opt(p, "--port", type=int)

    p = command("bench", "open-loop latency benchmark")
    for f in ("--ckpt", "--index", "--vocab", "--queries", "--url"):
        _opt(p, f)
    _opt(p, "--qps", type=float)
    _opt(p, "--duration", type=float)
    _opt(p, "--k", type=int)
    _opt(p, "-o", "--out")

    p = command("stats", "corpus statistics")
    _opt(p, "--pois")
    _opt(p, "--clicks")
    _opt(p, "-o", "--out")

    p = command("trace", "top max-pool activations of a query/POI pair")
    for f in ("--ckpt", "--vocab", "--pois", "--query", "--poi-id"):
        _opt(p, f)
    _opt(p, "--top-k", dest="top_k", type=int)
    _opt(p, "-o", "--out")
    return parser


# -- helpers ------------------------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve(command, ns: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS["common"])
    for g in {"train": ("model", "train"), "ablate": ("model", "train")}.get(command, (command,)):
        cfg.update(DEFAULTS.get(g, {}))
    cfg.update(PATH_DEFAULTS.get(command, {}))
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
    path = given.pop("config", None)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                filecfg = json.load(f)
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(filecfg, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        allowed = set(cfg) | {a.dest for a in _subparser(command)._actions}
        unknown = sorted(set(filecfg) - allowed - {"config", "help"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(filecfg)
    cfg.update(given)
    return cfg


_PARSER = None


def _subparser(command):
    global _PARSER
    _PARSER = _PARSER or build_parser()
    for action in _PARSER._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise UsageError(f"unknown command {command}")


def need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _rel(path, base):
    return os.path.relpath(os.path.abspath(path), os.path.abspath(base)).replace(os.sep, "/")


def write_manifest(command, cfg, inputs, outputs, out_dir, wall_time) -> str:
    """Record the run; paths are stored relative to the manifest directory."""
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(cfg.items())
                   if not (k in PATH_KEYS and (v is None or isinstance(v, str)))},
        "seed": cfg.get("seed"),
        "inputs": {k: {"path": _rel(p, out_dir), "sha256": file_sha256(p)} for k, p in sorted(inputs.items())},
        "outputs": {k: {"path": _rel(p, out_dir), "sha256": file_sha256(p)} for k, p in sorted(outputs.items())},
        "wall_time": wall_time,
    }
    path = os.path.join(out_dir, f"{command}.manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False) + "\n")
    return path


def manifest_digest(path) -> str:
    """Hash of a manifest with its wall-clock field removed."""
    with open(path, encoding="utf-8") as f:
        m = json.load(f)
    m.pop("wall_time", None)
    return hashlib.sha256(json.dumps(m, sort_keys=True).encode("utf-8")).hexdigest()


def _out_dir(path, is_dir=False):
    d = path if is_dir else (os.path.dirname(path) or ".")
    os.makedirs(d, exist_ok=True)
    return d


def make_vocab(pois, queries, letter_cap, word_cap):
    """Letters and words counted over POI text and queries; the word
    dictionary comes from POI text alone (queries carry no word spacing)."""
    from .textrep import SegmenterDict, build_vocab

    poi_texts = [t for p in pois for t in (p.name, p.address)]
    return build_vocab(poi_texts + list(queries), letter_cap, word_cap,
                       segmenter=SegmenterDict.from_corpus(poi_texts))


def make_encoder(vocab, model_config):
    from .textrep import TextEncoder

    return TextEncoder(vocab, max_letters=model_config.max_letters, max_words=model_config.max_words)


def load_model(ckpt_path, vocab_path):
    """Checkpoint plus the vocabulary it was trained with (hash-checked)."""
    from .textrep import Vocabulary
    from .training import load_checkpoint

    ckpt = load_checkpoint(ckpt_path)
    vocab = Vocabulary.load(vocab_path)
    if ckpt.vocab_hash and vocab.digest() != ckpt.vocab_hash:
        raise DataError(f"vocabulary {vocab_path} does not match checkpoint {ckpt_path}")
    if vocab.size != ckpt.model_config.vocab_size:
        raise DataError(f"vocabulary size {vocab.size} != checkpoint vocab_size {ckpt.model_config.vocab_size}")
    return ckpt, vocab, make_encoder(vocab, ckpt.model_config)


def _configs(cfg, vocab_size):
    from .towers import ModelConfig
    from .training import TrainConfig

    mc = ModelConfig(vocab_size=vocab_size, **{k: cfg[k] for k in MODEL_KEYS})
    tc = TrainConfig(seed=cfg["seed"], **{k: cfg[k] for k in TRAIN_KEYS})
    return mc, tc


def _emit(obj, out):
    text = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    if out:
        _out_dir(out)
        with open(out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    sys.stdout.write(text)


def _sibling(path, name):
    return os.path.join(os.path.dirname(path) or ".", name)


# -- commands -----------------------------------------------------------------

def cmd_gen(cfg):
    from .corpus import gen_synthetic

    corpus = gen_synthetic(cfg["seed"], cfg["pois"], cfg["queries"])
    out = _out_dir(cfg["out"], is_dir=True)
    paths = corpus.write(out)
    outputs = {os.path.basename(p).split(".")[0]: p for p in paths}
    return out, {}, outputs


def cmd_vocab(cfg):
    from .corpus import load_clicks, load_poi_db

    need(cfg, "pois")
    pois = load_poi_db(cfg["pois"])
    inputs = {"pois": cfg["pois"]}
    queries = []
    if cfg.get("clicks"):
        queries = [c.query for c in load_clicks(cfg["clicks"])]
        inputs["clicks"] = cfg["clicks"]
    vocab = make_vocab(pois, queries, cfg["letter_cap"], cfg["word_cap"])
    out = cfg["out"] or _sibling(cfg["pois"], "vocab.txt")
    d = _out_dir(out)
    vocab.save(out)
    log.info("vocabulary: %d letters, %d words", vocab.count("letter"), vocab.count("word"))
    return d, inputs, {"vocab": out}


def cmd_train(cfg):
    from .corpus import load_clicks, load_poi_db
    from .textrep import Vocabulary
    from .training import save_checkpoint, train, write_loss_log

    need(cfg, "pois", "clicks", "vocab", "out")
    pois = load_poi_db(cfg["pois"])
    clicks = load_clicks(cfg["clicks"], pois)
    vocab = Vocabulary.load(cfg["vocab"])
    mc, tc = _configs(cfg, vocab.size)
    encoder = make_encoder(vocab, mc)
    out = _out_dir(cfg["out"], is_dir=True)
    outputs = {}
    vh = vocab.digest()

    def on_epoch(epoch, params, step):
        path = os.path.join(out, f"model.e{epoch}.dpsm")
        save_checkpoint(path, params, tc, vh, step)
        outputs[f"model.e{epoch}"] = path

    result = train([(c.query, c.poi_id) for c in clicks], pois, encoder, mc, tc, on_epoch=on_epoch)
    final = os.path.join(out, "model.dpsm")
    save_checkpoint(final, result.params, tc, vh, result.steps)
    loss_path = os.path.join(out, "loss.csv")
    write_loss_log(loss_path, result.loss_log)
    outputs.update(model=final, loss=loss_path)
    for e, loss in enumerate(result.epoch_losses, 1):
        log.info("epoch %d mean loss %.6f", e, loss)
    return out, {"pois": cfg["pois"], "clicks": cfg["clicks"], "vocab": cfg["vocab"]}, outputs


def _kinds_for(cfg, judged_path):
    from .corpus import load_query_kinds

    path = cfg.get("kinds")
    if path is None and os.path.exists(_sibling(judged_path, "query_kinds.tsv")):
        path = _sibling(judged_path, "query_kinds.tsv")
    return (load_query_kinds(path), path) if path else (None, None)


def cmd_eval(cfg):
    from .corpus import load_judged, load_poi_db
    from .evaluation import evaluate_dataset
    from .features import PoiFeatures

    need(cfg, "ckpt", "judged")
    pois_path = cfg["pois"] or _sibling(cfg["judged"], "pois.tsv")
    vocab_path = cfg["vocab"] or _sibling(cfg["ckpt"], "vocab.txt")
    ckpt, vocab, encoder = load_model(cfg["ckpt"], vocab_path)
    judged = load_judged(cfg["judged"])
    kinds, kinds_path = _kinds_for(cfg, cfg["judged"])
    pois = PoiFeatures(load_poi_db(pois_path), encoder)
    report = evaluate_dataset(ckpt.params, judged, pois, encoder, tuple(cfg["k"]), kinds,
                              model=ckpt.hash)
    out = cfg["out"] or os.path.join(os.path.dirname(cfg["ckpt"]) or ".", "eval.json")
    _emit(report.to_dict(), out)
    inputs = {"ckpt": cfg["ckpt"], "judged": cfg["judged"], "pois": pois_path, "vocab": vocab_path}
    if kinds_path:
        inputs["kinds"] = kinds_path
    return os.path.dirname(out) or ".", inputs, {"report": out}


def cmd_ablate(cfg):
    from .corpus import load_clicks, load_judged, load_poi_db
    from .evaluation import format_table, run_ablation
    from .textrep import Vocabulary

    need(cfg, "pois", "clicks", "judged", "vocab")
    pois = load_poi_db(cfg["pois"])
    clicks = load_clicks(cfg["clicks"], pois)
    judged = load_judged(cfg["judged"])
    vocab = Vocabulary.load(cfg["vocab"])
    kinds, kinds_path = _kinds_for(cfg, cfg["judged"])
    mc, tc = _configs(cfg, vocab.size)
    rows = run_ablation(clicks, pois, judged, make_encoder(vocab, mc), mc, tc, kinds=kinds)
    out = _out_dir(cfg["out"], is_dir=True)
    jpath, tpath = os.path.join(out, "ablation.json"), os.path.join(out, "ablation.txt")
    payload = [{"name": r.name, "feature_flags": r.config.to_dict()["feature_flags"],
                "epoch_losses": r.epoch_losses, "report": r.report.to_dict()} for r in rows]
    with open(jpath, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n")
    text = "overall\n" + format_table(rows)
    if kinds:
        text += "\naddress queries\n" + format_table(rows, slice_name="kind:address")
    with open(tpath, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    sys.stdout.write(text)
    inputs = {"pois": cfg["pois"], "clicks": cfg["clicks"], "judged": cfg["judged"], "vocab": cfg["vocab"]}
    if kinds_path:
        inputs["kinds"] = kinds_path
    return out, inputs, {"ablation_json": jpath, "ablation_txt": tpath}


def cmd_index(cfg):
    from .corpus import load_poi_db
    from .serving import build_index

    need(cfg, "ckpt", "pois")
    vocab_path = cfg.get("vocab") or _sibling(cfg["ckpt"], "vocab.txt")
    ckpt, _, encoder = load_model(cfg["ckpt"], vocab_path)
    index = build_index(ckpt.params, encoder, load_poi_db(cfg["pois"]), ckpt.hash)
    out = cfg.get("out") or _sibling(cfg["ckpt"], "index.dpsi")
    d = _out_dir(out)
    index.save(out)
    return d, {"ckpt": cfg["ckpt"], "pois": cfg["pois"], "vocab": vocab_path}, {"index": out}


def _snapshot(cfg):
    from .serving import PoiIndex, Snapshot

    need(cfg, "ckpt", "index")
    vocab_path = cfg.get("vocab") or _sibling(cfg["ckpt"], "vocab.txt")
    ckpt, _, encoder = load_model(cfg["ckpt"], vocab_path)
    index = PoiIndex.load(cfg["index"])
    if index.checkpoint_hash != ckpt.hash:
        raise DataError(f"index {cfg['index']} was built from a different checkpoint")
    return Snapshot.create(ckpt.params, encoder, index), vocab_path


def cmd_serve(cfg):
    from .serving import serve

    snap, _ = _snapshot(cfg)
    print(f"serving model {snap.model} on http://{cfg['host']}:{cfg['port']}", file=sys.stderr)
    serve(snap, cfg["host"], cfg["port"])
    return None, {}, {}


def _read_queries(path):
    with open(path, encoding="utf-8") as f:
        qs = [line.rstrip("\n").split("\t")[0] for line in f]
    return [q for q in qs if q]


def cmd_bench(cfg):
    from .serving import bench_latency

    need(cfg, "queries")
    queries = _read_queries(cfg["queries"])
    inputs = {"queries": cfg["queries"]}
    if cfg.get("url"):
        report = bench_latency(queries, cfg["qps"], cfg["duration"], url=cfg["url"], k=cfg["k"],
                               seed=cfg["seed"])
    else:
        snap, vocab_path = _snapshot(cfg)
        inputs.update(ckpt=cfg["ckpt"], index=cfg["index"], vocab=vocab_path)
        report = bench_latency(queries, cfg["qps"], cfg["duration"], snap=snap, k=cfg["k"],
                               seed=cfg["seed"])
    out = cfg.get("out") or "bench.csv"
    d = _out_dir(out)
    report.write_csv(out)
    summary = report.summary()
    json_out = os.path.splitext(out)[0] + ".json"
    _emit(summary, json_out)
    return d, inputs, {"csv": out, "summary": json_out}


def cmd_stats(cfg):
    from .corpus import compute_stats, load_clicks, load_poi_db

    need(cfg, "pois", "clicks")
    pois = load_poi_db(cfg["pois"])
    stats = compute_stats([c.query for c in load_clicks(cfg["clicks"])], pois)
    out = cfg.get("out") or _sibling(cfg["clicks"], "stats.json")
    _emit(stats.as_dict(), out)
    return os.path.dirname(out) or ".", {"pois": cfg["pois"], "clicks": cfg["clicks"]}, {"stats": out}


def cmd_trace(cfg):
    from .corpus import load_poi_db
    from .towers import common_indices, poi_forward, query_forward, trace_activations

    need(cfg, "ckpt", "pois", "query", "poi_id")
    vocab_path = cfg.get("vocab") or _sibling(cfg["ckpt"], "vocab.txt")
    ckpt, _, encoder = load_model(cfg["ckpt"], vocab_path)
    by_id = {p.poi_id: p for p in load_poi_db(cfg["pois"])}
    if cfg["poi_id"] not in by_id:
        raise DataError(f"poi_id {cfg['poi_id']!r} is not in {cfg['pois']}")
    poi = by_id[cfg["poi_id"]]
    _, qcache = query_forward(*encoder.encode(cfg["query"]), ckpt.params, return_cache=True)
    _, pcache = poi_forward(*encoder.encode(poi.name), *encoder.encode(poi.address), ckpt.params,
                            return_cache=True)
    qt, pt = trace_activations(qcache, cfg["top_k"]), trace_activations(pcache, cfg["top_k"])
    common = {}
    for qk, qv in qt.items():
        if qk == "output":
            continue
        gran = qk.split("/")[1]
        for pk, pv in pt.items():
            if pk.endswith(f"/{gran}/maxpool"):
                common[f"{qk} ~ {pk}"] = common_indices(qv, pv)
    common["output"] = common_indices(qt["output"], pt["output"])
    result = {"query": cfg["query"], "poi_id": poi.poi_id, "model": ckpt.hash,
              "query_trace": {k: [list(x) for x in v] for k, v in qt.items()},
              "poi_trace": {k: [list(x) for x in v] for k, v in pt.items()},
              "common_indices": common}
    out = cfg.get("out") or _sibling(cfg["ckpt"], "trace.json")
    _emit(result, out)
    return os.path.dirname(out) or ".", {"ckpt": cfg["ckpt"], "pois": cfg["pois"], "vocab": vocab_path}, {"trace": out}


COMMANDS = {"gen": cmd_gen, "vocab": cmd_vocab, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "index": cmd_index, "serve": cmd_serve, "bench": cmd_bench,
            "stats": cmd_stats, "trace": cmd_trace}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        t0 = time.perf_counter()
        out_dir, inputs, outputs = COMMANDS[ns.command](cfg)
        if out_dir is not None:
            write_manifest(ns.command, cfg, inputs, outputs, out_dir, time.perf_counter() - t0)
    except (UsageError, ConfigError) as e:
        print(f"dpsm {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"dpsm {ns.command}: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SamplingError, RequestError, OSError, ConnectionError) as e:
        print(f"dpsm {ns.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
