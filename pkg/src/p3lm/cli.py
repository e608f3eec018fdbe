"""``p3lm`` command line: pretrain, finetune, generate, score, mask-dump, order-stats, plot, selfcheck.

Run configuration comes from an optional ``key = value`` file (``--config``)
overridden by ``--set key=value`` and by the per-key flags. Unknown keys are
rejected and the resolved configuration is written beside every output.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

from scipy.stats import chi2

from . import __version__
from .data import EOS_ID, Example, SpanMaskSpec, SpecError, Vocabulary, apply_span_mask, dataset_manifest, gen_synthetic
from .inference import BeamConfig, ModelScorer, beam_search, score_sequence
from .metrics import exact_match, rouge_l, token_accuracy
from .model import ModelConfig, P3LM, load_checkpoint
from .numerics import CheckpointError, NumericError, RngStream
from .order import (
    DecodeOrder,
    OrderDistribution,
    OrderError,
    OrderKind,
    build_masks,
    dump_masks,
    parse_masks,
    parse_order,
    sample_order,
)
from .oracles import brute_force_masks
from .selfcheck import SUITES, run_selfcheck
from .training import DivergenceError, TrainingConfig, latest_checkpoint, loss_split, parse_log, split_data_file, train

log = logging.getLogger("p3lm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_SELFCHECK = 0, 1, 2, 3, 4
RESOLVED_NAME = "resolved_config.txt"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Key:
    type: Callable[[str], Any]
    default: Any
    help: str


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> Optional[int]:
    return None if str(text).strip().lower() in ("", "none") else int(text)


def _opt_str(text: str) -> Optional[str]:
    return None if str(text).strip().lower() in ("", "none") else str(text)


MODEL_KEYS = {
    "layers": Key(int, 2, "encoder and decoder layers"),
    "dim": Key(int, 64, "hidden size"),
    "ffn": Key(int, 128, "feed-forward size"),
    "heads": Key(int, 4, "attention heads"),
    "streams": Key(int, 2, "query streams N"),
    "max_positions": Key(int, 64, "positional table size"),
    "share_stream_params": Key(_bool, True, "one parameter set for all streams"),
    "stream_embeddings": Key(_bool, True, "per-stream placeholder embeddings"),
    "tie_output": Key(_bool, True, "tie output projection to token embeddings"),
    "dropout": Key(float, 0.1, "attention dropout"),
}

TRAIN_KEYS = {
    "lr": Key(float, 1e-4, "peak learning rate"),
    "warmup": Key(int, 0, "linear warmup steps"),
    "batch_size": Key(int, 32, "instances per batch"),
    "max_steps": Key(int, 1000, "update limit"),
    "epochs": Key(_opt_int, None, "epoch limit"),
    "order": Key(str, "alpha", "order prior: l2r, urp, alpha or alpha:<a>"),
    "alpha": Key(float, 0.5, "mixture weight of the L2R order"),
    "orders_per_instance": Key(int, 1, "sampled orders per instance (R)"),
    "clip_norm": Key(float, 1.0, "gradient-norm clip"),
    "seed": Key(int, 0, "run seed"),
    "plot_image": Key(_opt_str, None, "optional image file for the loss-split curves"),
}

COMMAND_KEYS: Dict[str, Dict[str, Key]] = {
    "pretrain": {
        "corpus": Key(str, None, "text corpus, one document per line"),
        "vocab": Key(_opt_str, None, "vocabulary file (default: built from the corpus)"),
        "vocab_size": Key(_opt_int, None, "cap when building the vocabulary"),
        "window": Key(int, 64, "span-masking window"),
        "mask_frac": Key(float, 0.15, "masked fraction per window"),
        **MODEL_KEYS,
        **TRAIN_KEYS,
    },
    "finetune": {
        "task": Key(str, "copy", "copy, reverse, infill or file"),
        "train": Key(_opt_str, None, "tab-separated source/target file when task=file"),
        "vocab": Key(_opt_str, None, "vocabulary file for task=file"),
        "init": Key(_opt_str, None, "checkpoint to start from"),
        "vocab_size": Key(int, 32, "synthetic vocabulary size"),
        "count": Key(int, 20000, "synthetic training examples"),
        "heldout": Key(int, 200, "synthetic held-out examples scored after training"),
        "len_min": Key(int, 4, "shortest synthetic sequence"),
        "len_max": Key(int, 16, "longest synthetic sequence"),
        "data_seed": Key(int, 0, "seed for synthetic data"),
        **MODEL_KEYS,
        **TRAIN_KEYS,
    },
    "generate": {
        "checkpoint": Key(str, None, "checkpoint file (or directory: latest checkpoint)"),
        "vocab": Key(_opt_str, None, "vocabulary file (default: vocab.txt beside the checkpoint)"),
        "input": Key(str, None, "one source per line"),
        "output": Key(str, None, "one hypothesis per line"),
        "beam": Key(int, 5, "beam size"),
        "length_penalty": Key(float, 1.2, "length-penalty exponent"),
        "min_len": Key(int, 1, "minimum output length"),
        "max_len": Key(int, 32, "maximum output length"),
        "scores": Key(_bool, False, "append a tab-separated score column"),
    },
    "score": {
        "checkpoint": Key(str, None, "checkpoint file (or directory)"),
        "vocab": Key(_opt_str, None, "vocabulary file"),
        "input": Key(str, None, "tab-separated source/target lines"),
        "output": Key(str, None, "one log-probability per line"),
        "order": Key(str, "l2r", "l2r, urp (sampled) or an explicit permutation like 2,1,3"),
        "stream": Key(int, 1, "query stream n"),
        "eos": Key(_bool, True, "score the end-of-sequence token too"),
        "seed": Key(int, 0, "seed for sampled orders"),
    },
}


def parse_config_text(text: str, origin: str = "config") -> Dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{origin}:{lineno}: expected key = value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def resolve_config(command: str, file_path: Optional[str], overrides: Sequence[str], flags: Dict[str, Any]) -> Dict[str, Any]:
    schema = COMMAND_KEYS[command]
    raw: Dict[str, str] = {}
    if file_path:
        if not os.path.exists(file_path):
            raise DataError(f"config file not found: {file_path}")
        with open(file_path) as fh:
            raw.update(parse_config_text(fh.read(), file_path))
    for item in overrides:
        raw.update(parse_config_text(item, "--set"))
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown {command} config keys: {', '.join(unknown)}")
    resolved = {}
    for key, spec in schema.items():
        if flags.get(key) is not None:
            resolved[key] = flags[key]
        elif key in raw:
            try:
                resolved[key] = spec.type(raw[key])
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from exc
        else:
            resolved[key] = spec.default
    missing = [k for k, s in schema.items() if s.default is None and resolved[k] is None and s.type is str]
    if missing:
        raise UsageError(f"{command} needs: {', '.join(missing)}")
    return resolved


def format_config(values: Dict[str, Any]) -> str:
    def fmt(v):
        return "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(values.items()))


def write_resolved(directory: str, values: Dict[str, Any], name: str = RESOLVED_NAME) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, name), "w") as fh:
        fh.write(format_config(values))


def model_config(values: Dict[str, Any], vocab: int) -> ModelConfig:
    return ModelConfig(vocab=vocab, **{k: values[k] for k in MODEL_KEYS})


def training_config(values: Dict[str, Any]) -> TrainingConfig:
    keys = [k for k in TRAIN_KEYS if k != "plot_image"]
    return TrainingConfig(**{k: values[k] for k in keys})


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _read_lines(path: str) -> List[str]:
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    with open(path) as fh:
        return [line.rstrip("\n") for line in fh]


def _read_pairs(path: str) -> List[tuple]:
    pairs = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'source<TAB>target'")
        pairs.append((parts[0], parts[1]))
    return pairs


def _checkpoint_path(path: str) -> str:
    if os.path.isdir(path):
        return latest_checkpoint(path)
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return path


def _load_vocab(checkpoint: str, explicit: Optional[str]) -> Vocabulary:
    path = explicit or os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "vocab.txt")
    if not os.path.exists(path):
        raise DataError(f"vocabulary not found: {path}")
    return Vocabulary.load(path)


def _emit_loss_split(out_dir: str, image: Optional[str]) -> None:
    with open(os.path.join(out_dir, "loss_log.csv")) as fh:
        curves = loss_split(parse_log(fh.read()))
    with open(os.path.join(out_dir, "loss_split.dat"), "w") as fh:
        fh.write(split_data_file(curves))
    if image:
        render_image(curves, image)


def render_image(curves, path: str) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise UsageError("image output needs matplotlib; the .dat file is always written") from exc
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, label in (("l2r", "loss_l2r"), ("urp", "loss_urp")):
        pts = curves[name]
        if pts:
            ax.plot([e for e, _ in pts], [v for _, v in pts], marker="o", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss per token")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _run_training(model: P3LM, data: List[Example], values: Dict[str, Any], out_dir: str) -> None:
    cfg = training_config(values)
    log.info("training %d examples, %d parameters", len(data), sum(p.numel() for p in model.parameters()))

    def progress(rep):
        if rep.step % 50 == 0 or rep.step == 1:
            log.info("step %d epoch %d loss %.4f", rep.step, rep.epoch, rep.total)

    train(model, data, cfg, out_dir=out_dir, on_step=progress)
    _emit_loss_split(out_dir, values.get("plot_image"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(values: Dict[str, Any], out_dir: str) -> int:
    docs = [line for line in _read_lines(values["corpus"]) if line.strip()]
    if values["vocab"]:
        if not os.path.exists(values["vocab"]):
            raise DataError(f"vocabulary not found: {values['vocab']}")
        vocab = Vocabulary.load(values["vocab"])
    else:
        vocab = Vocabulary.from_corpus(docs, values["vocab_size"])
    try:
        spec = SpanMaskSpec(window=values["window"], mask_frac=values["mask_frac"])
    except SpecError as exc:
        raise DataError(str(exc)) from exc
    rng = RngStream(values["seed"]).split("masking")
    data: List[Example] = []
    # documents are concatenated and cut into consecutive windows
    stream = [t for doc in docs for t in vocab.encode(doc)]
    for start in range(0, len(stream) - spec.window + 1, spec.window):
        ex = apply_span_mask(stream[start : start + spec.window], spec, rng, len(vocab))
        data.append(Example(ex.source, ex.target))
    if not data:
        raise DataError(f"corpus has no full {spec.window}-token window")
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(out_dir, values)
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        fh.write(dataset_manifest("span_mask", values["seed"], {"documents": len(docs), "examples": len(data)}, window=spec.window, span_len=spec.span_len))
    model = P3LM(model_config(values, len(vocab)), seed=values["seed"])
    _run_training(model, data, values, out_dir)
    return EXIT_OK


def cmd_finetune(values: Dict[str, Any], out_dir: str) -> int:
    task = values["task"]
    heldout: List[Example] = []
    if task == "file":
        if not values["train"]:
            raise UsageError("task=file needs train=<path>")
        pairs = _read_pairs(values["train"])
        if values["vocab"]:
            vocab = Vocabulary.load(values["vocab"])
        elif values["init"]:
            vocab = _load_vocab(_checkpoint_path(values["init"]), None)
        else:
            vocab = Vocabulary.from_corpus([s + " " + t for s, t in pairs])
        data = [Example(vocab.encode(s), vocab.encode(t)) for s, t in pairs]
        data = [ex for ex in data if ex.source]
    elif task in ("copy", "reverse", "infill"):
        if values["init"]:
            vocab = _load_vocab(_checkpoint_path(values["init"]), values["vocab"])
        else:
            vocab = Vocabulary.synthetic(values["vocab_size"])
        rng = RngStream(values["data_seed"]).split(task)
        span = (values["len_min"], values["len_max"])
        data = gen_synthetic(task, len(vocab), span, values["count"], rng.split("train"))
        heldout = gen_synthetic(task, len(vocab), span, values["heldout"], rng.split("heldout"))
    else:
        raise UsageError(f"unknown task {task!r}")
    if not data:
        raise DataError("no training examples")

    if values["init"]:
        model = load_checkpoint(_checkpoint_path(values["init"]))
        if model.cfg.vocab != len(vocab):
            raise DataError(f"vocabulary has {len(vocab)} entries but the checkpoint expects {model.cfg.vocab}")
        model.train()
    else:
        model = P3LM(model_config(values, len(vocab)), seed=values["seed"])
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(out_dir, values)
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        fh.write(dataset_manifest(task, values["data_seed"], {"train": len(data), "heldout": len(heldout)}))
    _run_training(model, data, values, out_dir)

    if heldout:
        model.eval()
        preds = []
        for ex in heldout:
            hyp = beam_search(ModelScorer(model, ex.source), BeamConfig(beam=1, max_len=len(ex.target) + 4))[0]
            preds.append([t for t in hyp.tokens if t != EOS_ID])
        refs = [ex.target for ex in heldout]
        metrics = {
            "token_accuracy": token_accuracy(preds, refs),
            "exact_match": exact_match(preds, refs),
            "rouge_l_f": sum(rouge_l(p, r).f for p, r in zip(preds, refs)) / len(refs),
            "heldout": len(refs),
        }
        with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        log.info("held-out token accuracy %.4f exact match %.4f", metrics["token_accuracy"], metrics["exact_match"])
    return EXIT_OK


def cmd_generate(values: Dict[str, Any]) -> int:
    ckpt = _checkpoint_path(values["checkpoint"])
    model = load_checkpoint(ckpt)
    vocab = _load_vocab(ckpt, values["vocab"])
    try:
        cfg = BeamConfig(values["beam"], values["length_penalty"], values["min_len"], values["max_len"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = []
    for line in _read_lines(values["input"]):
        src = vocab.encode(line)
        if not src:
            raise DataError("empty source line")
        hyp = beam_search(ModelScorer(model, src), cfg)[0]
        text = vocab.decode(hyp.tokens)
        if hyp.truncated:
            log.warning("hypothesis for %r hit max_len without </s>", line)
        out.append(f"{text}\t{hyp.score(cfg.length_penalty):.6f}" if values["scores"] else text)
    _write_output(values, out)
    return EXIT_OK


def cmd_score(values: Dict[str, Any]) -> int:
    ckpt = _checkpoint_path(values["checkpoint"])
    model = load_checkpoint(ckpt)
    vocab = _load_vocab(ckpt, values["vocab"])
    rng = RngStream(values["seed"]).split("score")
    out = []
    for src_text, tgt_text in _read_pairs(values["input"]):
        src, tgt = vocab.encode(src_text), vocab.encode(tgt_text) + ([EOS_ID] if values["eos"] else [])
        if not src or not tgt:
            raise DataError("empty source or target")
        spec = values["order"].strip().lower()
        if spec == "l2r":
            order = DecodeOrder.identity(len(tgt))
        elif spec == "urp":
            order = sample_order(OrderDistribution.parse("urp"), len(tgt), rng)
        else:
            order = parse_order(values["order"])
            if order.T != len(tgt):
                raise DataError(f"order has {order.T} positions but the target has {len(tgt)}")
        try:
            lp = score_sequence(model, src, tgt, order, values["stream"])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        out.append(f"{lp:.6f}")
    _write_output(values, out)
    return EXIT_OK


def _write_output(values: Dict[str, Any], lines: List[str]) -> None:
    path = values["output"]
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("".join(line + "\n" for line in lines))
    write_resolved(directory, values, os.path.basename(path) + ".config")


def cmd_mask_dump(args) -> int:
    if args.order:
        order = parse_order(args.order)
    else:
        if not args.T:
            raise UsageError("mask-dump needs --order or --T with --dist")
        order = sample_order(OrderDistribution.parse(args.dist), args.T, RngStream(args.seed).split("mask-dump"))
    if args.T and order.T != args.T:
        raise UsageError(f"--T {args.T} disagrees with an order of length {order.T}")
    text = dump_masks(build_masks(order, args.N))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        write_resolved(
            os.path.dirname(os.path.abspath(args.out)),
            {"T": order.T, "N": args.N, "order": ",".join(map(str, order.z)), "dist": args.dist, "seed": args.seed},
            os.path.basename(args.out) + ".config",
        )
    else:
        sys.stdout.write(text)
    if args.verify:
        parsed = parse_masks(text)
        main, query = brute_force_masks(parsed.order.z, parsed.N)
        if not ((parsed.main == main).all() and (parsed.query == query).all() and dump_masks(parsed) == text):
            print("verify: FAIL", file=sys.stderr)
            return EXIT_SELFCHECK
        print("verify: PASS", file=sys.stderr)
    return EXIT_OK


def cmd_order_stats(args) -> int:
    dist = OrderDistribution.parse(args.dist)
    rng = RngStream(args.seed).split("order-stats")
    counts = Counter(sample_order(dist, args.T, rng).z for _ in range(args.draws))
    support = list(itertools.permutations(range(1, args.T + 1)))
    lines = ["order\tcount\tfrequency"]
    for z in support:
        c = counts.get(z, 0)
        if c == 0 and dist.kind is OrderKind.L2R:
            continue
        lines.append(f"{','.join(map(str, z))}\t{c}\t{c / args.draws:.6f}")
    identity = counts.get(tuple(range(1, args.T + 1)), 0) / args.draws
    lines.append(f"identity_frequency\t{identity:.6f}")
    df = len(support) - 1
    if dist.kind is OrderKind.URP and df > 0:
        # goodness of fit against the uniform distribution over permutations
        expected = args.draws / len(support)
        stat = sum((counts.get(z, 0) - expected) ** 2 / expected for z in support)
        lines.append(f"chi_square\t{stat:.6f}\tdf={df}\tcritical_0.001={chi2.ppf(0.999, df):.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    curves = loss_split(parse_log("\n".join(_read_lines(args.log))))
    with open(args.out, "w") as fh:
        fh.write(split_data_file(curves))
    if args.image:
        render_image(curves, args.image)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    unknown = [s for s in args.suite or [] if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suites: {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    results = run_selfcheck(args.seed, args.suite)
    ok = all(r.passed for r in results)
    print(f"selfcheck: {'PASS' if ok else 'FAIL'} ({sum(r.passed for r in results)}/{len(results)} suites)")
    return EXIT_OK if ok else EXIT_SELFCHECK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser, command: str) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key")
    for key, spec in COMMAND_KEYS[command].items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=spec.type, default=None, help=spec.help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p3lm", description="Permuted prophet decoding toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("pretrain", "finetune"):
        p = sub.add_parser(name, help=f"{name} a model")
        _add_config_args(p, name)
        p.add_argument("--out", required=True, help="output directory")
    for name in ("generate", "score"):
        p = sub.add_parser(name, help=f"{name} with a checkpoint")
        _add_config_args(p, name)

    p = sub.add_parser("mask-dump", help="write relative-order masks")
    p.add_argument("--T", type=int)
    p.add_argument("--N", type=int, default=2)
    p.add_argument("--order", help="explicit permutation, e.g. 2,1,3")
    p.add_argument("--dist", default="urp", help="distribution when sampling an order")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--verify", action="store_true", help="re-parse and compare against the brute-force masks")

    p = sub.add_parser("order-stats", help="sample orders and tabulate frequencies")
    p.add_argument("--dist", default="urp")
    p.add_argument("--T", type=int, default=3)
    p.add_argument("--draws", type=int, default=60_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("plot", help="loss-split curves from a loss log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True, help="gnuplot-readable data file")
    p.add_argument("--image", help="optional image (needs matplotlib)")

    p = sub.add_parser("selfcheck", help="run the oracle suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        if args.command in ("pretrain", "finetune", "generate", "score"):
            flags = {k: getattr(args, k) for k in COMMAND_KEYS[args.command]}
            values = resolve_config(args.command, args.config, args.set, flags)
            if args.command == "pretrain":
                return cmd_pretrain(values, args.out)
            if args.command == "finetune":
                return cmd_finetune(values, args.out)
            if args.command == "generate":
                return cmd_generate(values)
            return cmd_score(values)
        handler = {"mask-dump": cmd_mask_dump, "order-stats": cmd_order_stats, "plot": cmd_plot, "selfcheck": cmd_selfcheck}
        return handler[args.command](args)
    except (UsageError, OrderError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, SpecError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (DivergenceError, NumericError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
