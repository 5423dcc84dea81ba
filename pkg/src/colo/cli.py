"""Command-line entry point: gen-data, train, generate, evaluate, ablate, gradcheck.

Every command resolves its configuration as defaults < config file < flags,
runs deterministically from its seed, and writes a manifest (resolved config,
input/output content digests, timestamps) next to its artifacts.  Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

import argparse
import datetime
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ABLATION_ARMS = {
    "full": [],
    "no_ce": ["--no-ce"],
    "no_cd": ["--no-cd"],
    "lm_only": ["--no-ce", "--no-cd"],
    "es_only": ["--neg-types", "ES"],
    "as_only": ["--neg-types", "AS"],
    "os_only": ["--neg-types", "OS"],
}


class ConfigError(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_of(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(path, command, config, seed, inputs, outputs, started, ended):
    doc = {
        "command": command,
        "config": config,
        "config_digest": _digest_of(config),
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "artifacts": [str(p) for p in outputs],
        "started_at": started,
        "ended_at": ended,
    }
    with open(path, "w", encoding="ascii") as f:
        json.dump(doc, f, ensure_ascii=True, sort_keys=True, indent=2)
        f.write("\n")
    return doc


def parse_config_file(path):
    """Flat ``key = value`` format; values parse as JSON with string fallback."""
    out = {}
    with open(path, encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            try:
                out[key.strip()] = json.loads(value.strip())
            except json.JSONDecodeError:
                out[key.strip()] = value.strip()
    return out


def _resolve(defaults, file_cfg, flag_values):
    """defaults < config file < explicit flags; unknown file keys rejected."""
    merged = dict(defaults)
    for key, value in file_cfg.items():
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    return merged


def _default_out(seed):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{stamp}-s{seed}"


def _load_bundle(corpus_dir):
    from .corpus import Corpus, Vocab, read_corpus, read_lexicon

    corpus_dir = Path(corpus_dir)
    corpus_path = corpus_dir / "corpus.jsonl"
    lexicon_path = corpus_dir / "lexicon.json"
    if not corpus_path.exists() or not lexicon_path.exists():
        raise FileNotFoundError(f"{corpus_dir}: expected corpus.jsonl and lexicon.json")
    lexicon = read_lexicon(lexicon_path)
    examples = read_corpus(corpus_path)
    return Corpus(lexicon, examples), Vocab.build(lexicon), corpus_path, lexicon_path


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    from .corpus import CorpusConfig, generate_corpus, write_corpus, write_lexicon

    started = _now()
    defaults = {k: getattr(CorpusConfig(), k) for k in CorpusConfig.__dataclass_fields__}
    file_cfg = parse_config_file(args.config) if args.config else {}
    flags = {
        "n_examples": args.n_examples,
        "n_entities": args.entities,
        "n_aspects": args.aspects,
        "n_opinions": args.opinions,
        "n_aliases_per_item": args.aliases,
        "template_pool_size": args.template_pool,
        "seed": args.seed,
    }
    resolved = _resolve(defaults, file_cfg, flags)
    for key in ("split_ratio", "distractor_range", "profile_attrs_range", "ref_len_bounds"):
        resolved[key] = tuple(resolved[key])
    cfg = CorpusConfig(**resolved)

    out = Path(args.out) if args.out else _default_out(cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    corpus_path = out / "corpus.jsonl"
    lexicon_path = out / "lexicon.json"
    for p in (corpus_path, lexicon_path):
        if p.exists() and not args.force:
            print(f"refusing to overwrite {p} (use --force)", file=sys.stderr)
            return EXIT_DATA

    lexicon, examples = generate_corpus(cfg)
    write_lexicon(lexicon_path, lexicon)
    write_corpus(corpus_path, examples)
    manifest_cfg = dict(resolved)
    for key in ("split_ratio", "distractor_range", "profile_attrs_range", "ref_len_bounds"):
        manifest_cfg[key] = list(manifest_cfg[key])
    write_manifest(
        out / "gen-data.manifest.json",
        "gen-data",
        manifest_cfg,
        cfg.seed,
        [],
        [corpus_path, lexicon_path],
        started,
        _now(),
    )
    counts = {s: sum(1 for e in examples if e.split == s) for s in ("train", "valid", "test")}
    print(f"wrote {len(examples)} examples {counts} to {corpus_path}")
    return 0


# ---------------------------------------------------------------------------
# train


def _model_config_from(resolved, vocab_size):
    from .model import ModelConfig

    keys = [k for k in ModelConfig.__dataclass_fields__ if k != "vocab_size"]
    return ModelConfig(vocab_size=vocab_size, **{k: resolved[k] for k in keys})


def cmd_train(args):
    from .model import ModelConfig
    from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

    started = _now()
    train_defaults = {k: getattr(TrainConfig(), k) for k in TrainConfig.__dataclass_fields__}
    model_defaults = {
        k: v.default for k, v in ModelConfig.__dataclass_fields__.items() if k != "vocab_size"
    }
    defaults = {**train_defaults, **model_defaults}
    file_cfg = parse_config_file(args.config) if args.config else {}
    flags = {
        "learning_rate": args.lr,
        "gamma": args.gamma,
        "batch_size": args.batch,
        "epochs": args.epochs,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "max_steps": args.max_steps,
        "grad_clip_norm": args.grad_clip,
        "d_model": args.d_model,
    }
    if args.no_ce:
        flags["use_ce"] = False
    if args.no_cd:
        flags["use_cd"] = False
    if args.neg_types:
        flags["neg_types"] = [t.strip().upper() for t in args.neg_types.split(",") if t.strip()]
    if args.project_in_ce:
        flags["project_in_ce"] = True
    resolved = _resolve(defaults, file_cfg, flags)
    resolved["neg_types"] = tuple(resolved["neg_types"])

    corpus, vocab, corpus_path, lexicon_path = _load_bundle(args.corpus)
    tcfg = TrainConfig(**{k: resolved[k] for k in train_defaults})
    mcfg = _model_config_from(resolved, len(vocab))

    out = Path(args.out) if args.out else _default_out(tcfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.ckpt"
    log_path = out / "train_log.jsonl"

    params = adam = None
    start_step = 0
    inputs = [corpus_path, lexicon_path]
    if args.resume:
        loaded = load_checkpoint(args.resume)
        params, adam, start_step = loaded.params, loaded.adam, loaded.step
        inputs.append(Path(args.resume))

    with open(log_path, "w", encoding="ascii") as log_file:
        ckpt, _ = train(tcfg, corpus, mcfg, params=params, adam=adam, start_step=start_step, log_file=log_file)
    save_checkpoint(ckpt_path, ckpt)

    manifest_cfg = {
        "train": tcfg.to_dict(),
        "model": mcfg.to_dict(),
        "corpus_digest": _sha256(corpus_path),
    }
    write_manifest(
        out / "train.manifest.json", "train", manifest_cfg, tcfg.seed,
        inputs, [ckpt_path, log_path], started, _now(),
    )
    print(f"trained {ckpt.step} steps -> {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args):
    from .corpus import encode_example
    from .decoding import beam_search
    from .tokens import EOS_ID
    from .trainer import load_checkpoint

    started = _now()
    ckpt = load_checkpoint(args.ckpt)
    corpus, vocab, corpus_path, lexicon_path = _load_bundle(args.corpus)
    examples = corpus.split(args.split) if args.split else corpus.examples
    if args.limit:
        examples = examples[: args.limit]

    out = Path(args.out) if args.out else _default_out(ckpt.train_config.seed) / "predictions.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="ascii") as f:
        for i, ex in enumerate(examples):
            enc = encode_example(ex, corpus.lexicon, vocab, ckpt.model_config.max_src_len)
            ranked = beam_search(
                ckpt.params, ckpt.model_config, enc.src_ids,
                beam_size=args.beam, length_norm=args.length_norm,
            )
            pred = vocab.detokenize([t for t in ranked[0] if t != EOS_ID])
            f.write(json.dumps({"example_id": i, "prediction": pred}, sort_keys=True) + "\n")
    config = {"beam": args.beam, "length_norm": args.length_norm, "split": args.split, "limit": args.limit}
    write_manifest(
        Path(str(out) + ".manifest.json"), "generate", config,
        ckpt.train_config.seed, [Path(args.ckpt), corpus_path, lexicon_path], [out], started, _now(),
    )
    print(f"wrote {len(examples)} predictions -> {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _read_predictions(path, n_expected):
    preds = {}
    with open(path, encoding="ascii") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                preds[int(rec["example_id"])] = list(rec["prediction"])
    missing = [i for i in range(n_expected) if i not in preds]
    if missing:
        raise KeyError(f"predictions file {path} is missing example_id {missing[0]}")
    return [preds[i] for i in range(n_expected)]


def cmd_evaluate(args):
    from .evaluation import (
        decode_corpus,
        mean_entity_swap_similarity,
        metrics_report,
        perplexity,
        write_report,
    )
    from .trainer import load_checkpoint

    started = _now()
    if not args.ckpt and not args.predictions:
        raise ConfigError("evaluate needs --ckpt or --predictions")
    corpus, vocab, corpus_path, lexicon_path = _load_bundle(args.corpus)
    examples = corpus.split(args.split)
    if args.limit:
        examples = examples[: args.limit]
    if not examples:
        raise ConfigError(f"split {args.split!r} is empty")

    inputs = [corpus_path, lexicon_path]
    ckpt = None
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        inputs.append(Path(args.ckpt))

    if args.predictions:
        preds = _read_predictions(args.predictions, len(examples))
        inputs.append(Path(args.predictions))
    else:
        preds = decode_corpus(
            ckpt.params, ckpt.model_config, examples, corpus.lexicon, vocab,
            beam_size=args.beam, length_norm=args.length_norm,
        )

    ppl = es_sim = None
    if ckpt is not None:
        ppl = perplexity(ckpt.params, ckpt.model_config, examples, corpus.lexicon, vocab)
        es_sim = mean_entity_swap_similarity(
            ckpt.params, ckpt.model_config, examples, corpus.lexicon, vocab
        )
    report = metrics_report(preds, examples, corpus.lexicon, ppl=ppl)

    config = {
        "split": args.split,
        "beam": args.beam,
        "length_norm": args.length_norm,
        "limit": args.limit,
        "corpus_digest": _sha256(corpus_path),
        "ckpt_digest": _sha256(args.ckpt) if args.ckpt else None,
        "predictions": bool(args.predictions),
    }
    out = Path(args.out) if args.out else Path("report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {"es_similarity": es_sim, "config_digest": _digest_of(config)}
    write_report(out, report, extra=extra)
    write_manifest(
        Path(str(out) + ".manifest.json"), "evaluate", config,
        ckpt.train_config.seed if ckpt else 0, inputs, [out], started, _now(),
    )
    print(json.dumps(report.scaled(), sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# ablate


def _run_children(cmds, jobs):
    """Run command lines with at most ``jobs`` concurrent subprocesses."""
    env = dict(os.environ)
    env.setdefault("OPENBLAS_NUM_THREADS", "1")
    env.setdefault("OMP_NUM_THREADS", "1")
    pending = list(cmds)
    running = []
    while pending or running:
        while pending and len(running) < jobs:
            cmd = pending.pop(0)
            running.append((cmd, subprocess.Popen(cmd, env=env)))
        cmd, proc = running.pop(0)
        code = proc.wait()
        if code != 0:
            for _, p in running:
                p.terminate()
            raise RuntimeError(f"subprocess failed with exit {code}: {' '.join(map(str, cmd))}")


def cmd_ablate(args):
    started = _now()
    out = Path(args.out) if args.out else _default_out(args.seed0)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed0 + i for i in range(args.seeds)]
    arms = list(ABLATION_ARMS) if not args.arms else [a.strip() for a in args.arms.split(",")]
    for arm in arms:
        if arm not in ABLATION_ARMS:
            raise ConfigError(f"unknown ablation arm {arm!r}; choose from {sorted(ABLATION_ARMS)}")

    base = [sys.executable, "-m", "colo"]
    train_cmds, eval_cmds = [], []
    for arm in arms:
        for seed in seeds:
            run_dir = out / f"{arm}-s{seed}"
            train_cmd = base + [
                "train",
                "--corpus", str(args.corpus),
                "--out", str(run_dir),
                "--seed", str(seed),
                "--epochs", str(args.epochs),
                "--batch", str(args.batch),
                "--lr", str(args.lr),
                "--gamma", str(args.gamma),
                "--eval-every", str(args.eval_every),
            ] + ABLATION_ARMS[arm]
            eval_cmd = base + [
                "evaluate",
                "--corpus", str(args.corpus),
                "--ckpt", str(run_dir / "model.ckpt"),
                "--split", "test",
                "--beam", str(args.beam),
                "--out", str(run_dir / "report.json"),
            ]
            train_cmds.append(train_cmd)
            eval_cmds.append(eval_cmd)

    _run_children(train_cmds, args.jobs)
    _run_children(eval_cmds, args.jobs)

    table = {}
    for arm in arms:
        rows = []
        for seed in seeds:
            with open(out / f"{arm}-s{seed}" / "report.json", encoding="ascii") as f:
                rows.append(json.load(f))
        table[arm] = {"seeds": seeds}
        for key in ("cover", "entail", "b4", "es_similarity"):
            vals = [r[key] if key in r else r["scaled"][key] / 100.0 for r in rows]
            mean = sum(vals) / len(vals)
            sd = (sum((v - mean) ** 2 for v in vals) / len(vals)) ** 0.5
            table[arm][key] = {"mean": mean, "sd": sd, "values": vals}

    doc = {"arms": table, "config": {
        "seeds": seeds, "epochs": args.epochs, "batch": args.batch, "lr": args.lr,
        "gamma": args.gamma, "beam": args.beam, "corpus": str(args.corpus),
    }}
    ablation_path = out / "ablation.json"
    with open(ablation_path, "w", encoding="ascii") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")

    header = f"{'arm':10s} {'Cover':>14s} {'Entail':>14s} {'B-4':>14s} {'ES-sim':>14s}"
    print(header)
    for arm in arms:
        row = table[arm]

        def ms(key):
            return f"{row[key]['mean'] * 100:6.2f}±{row[key]['sd'] * 100:5.2f}"

        print(f"{arm:10s} {ms('cover'):>14s} {ms('entail'):>14s} {ms('b4'):>14s} {ms('es_similarity'):>14s}")
    write_manifest(
        out / "ablate.manifest.json", "ablate", doc["config"], args.seed0,
        [], [ablation_path], started, _now(),
    )
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    from .gradcheck import run_all

    results = run_all()
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:28s} max_rel_err={r.max_rel_err:.3e}  threshold={r.threshold:g}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="colo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus and lexicon")
    g.add_argument("--out", help="output directory (default runs/<ts>-s<seed>)")
    g.add_argument("--config", help="flat key = value config file")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-examples", type=int)
    g.add_argument("--entities", type=int)
    g.add_argument("--aspects", type=int)
    g.add_argument("--opinions", type=int)
    g.add_argument("--aliases", type=int)
    g.add_argument("--template-pool", type=int)
    g.add_argument("--force", action="store_true", help="overwrite existing files")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated corpus")
    t.add_argument("--corpus", required=True, help="directory with corpus.jsonl and lexicon.json")
    t.add_argument("--out", help="run directory")
    t.add_argument("--config")
    t.add_argument("--lr", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--d-model", type=int)
    t.add_argument("--no-ce", action="store_true", help="drop the contrastive encoding loss")
    t.add_argument("--no-cd", action="store_true", help="drop the contrastive decoding loss")
    t.add_argument("--neg-types", help="comma list from ES,AS,OS (default all)")
    t.add_argument("--project-in-ce", action="store_true")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("generate", help="decode tuples from a corpus file")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--beam", type=int, default=5)
    d.add_argument("--length-norm", type=float, default=1.0)
    d.add_argument("--limit", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="compute the metric report for a split")
    e.add_argument("--ckpt")
    e.add_argument("--predictions", help="JSONL predictions instead of decoding")
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--beam", type=int, default=5)
    e.add_argument("--length-norm", type=float, default=1.0)
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and evaluate the ablation arms")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--seed0", type=int, default=0)
    a.add_argument("--epochs", type=int, default=10)
    a.add_argument("--batch", type=int, default=16)
    a.add_argument("--lr", type=float, default=2e-4)
    a.add_argument("--gamma", type=float, default=0.01)
    a.add_argument("--beam", type=int, default=5)
    a.add_argument("--eval-every", type=int, default=0)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--arms", help="comma list (default all seven)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of all ops and losses")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    from .contrastive import InfeasibleNegativeError
    from .corpus import CapacityError, CorpusError
    from .evaluation import EvalError
    from .trainer import CheckpointError, NumericError

    try:
        return args.func(args)
    except (ConfigError, CapacityError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, CheckpointError, EvalError, InfeasibleNegativeError, FileNotFoundError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
