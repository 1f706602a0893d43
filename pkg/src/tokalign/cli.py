"""Command-line entry point.

Every subcommand reads a run config (file or preset name) plus ``key=value``
overrides and writes its outputs under ``--out-dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .checkpoint import CheckpointError, loadCheckpoint, saveCheckpoint
from .config import CONFIG_ENV, PRESETS, RunConfig, dumps, load
from .decoding import CfgConfig, generate_batch, item_rng
from .evaluation import format_table, sweep_rows
from .metrics import cerWer, ssim_proxy
from .model import ConfigError
from .preference import read_pairs, write_pairs
from .training import context_slice, make_cond, write_csv
from .world import DomainError, frame_budget, generateRegularTexts, mockAsrDecode, read_utterances, \
    synthesize, write_utterances

log = logging.getLogger("tokalign")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(s: str) -> list[int]:
    try:
        return [int(x) for x in s.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help=f"config file or preset ({', '.join(PRESETS)}); "
                                         f"defaults to ${CONFIG_ENV}, else built-in defaults")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. model.hiddenDim=32 (repeatable)")
    common.add_argument("--seed", type=int, help="override rootSeed")
    common.add_argument("--out-dir", default=".", help="directory for all outputs (default: .)")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")

    p = Parser(prog="tokalign", description="Toy codec-token TTS with guidance and preference alignment.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    s = sub.add_parser("make-world", parents=[common], help="synthesize the training corpus")
    s.add_argument("--out", help="corpus path (default: <datasets>/train.jsonl)")

    s = sub.add_parser("train", parents=[common], help="train the base model")
    s.add_argument("--data", help="corpus from make-world (default: <datasets>/train.jsonl)")
    s.add_argument("--iters", type=int, help="training iterations (overrides train.iters)")
    s.add_argument("--out", help="checkpoint path (default: <checkpoints>/base.ckpt)")

    s = sub.add_parser("gen-prefs", parents=[common], help="sample, score and pair generations")
    s.add_argument("--base", help="base checkpoint (default: <checkpoints>/base.ckpt)")
    s.add_argument("--mode", choices=["dpo", "rpo"], help="pairing mode (default: align.method)")
    s.add_argument("--samples-per-prompt", type=int, help="P, generations per prompt")
    s.add_argument("--gt-as-chosen", action="store_true", help="use ground-truth grids as chosen")
    s.add_argument("--out", help="dataset path (default: <datasets>/prefs_<mode>.jsonl)")

    s = sub.add_parser("align", parents=[common], help="DPO/RPO fine-tuning against the frozen base")
    s.add_argument("--method", choices=["dpo", "rpo"], help="preference loss (default: align.method)")
    s.add_argument("--beta", type=float, help="align.beta")
    s.add_argument("--eta", type=float, help="align.eta")
    s.add_argument("--lr", type=float, help="align.learningRate")
    s.add_argument("--iters", type=int, help="align.maxIters")
    s.add_argument("--pairs", help="preference dataset (default: <datasets>/prefs_<method>.jsonl)")
    s.add_argument("--base", help="reference checkpoint (default: <checkpoints>/base.ckpt)")
    s.add_argument("--out", help="aligned checkpoint (default: <checkpoints>/<method>.ckpt)")

    s = sub.add_parser("infer", parents=[common], help="generate code grids for given texts")
    s.add_argument("--ckpt", help="checkpoint (default: <checkpoints>/base.ckpt)")
    s.add_argument("--text", type=_ints, action="append", required=True,
                   help="comma-separated symbol ids (repeatable)")
    s.add_argument("--speaker", type=int, default=None, help="speaker id for the context (default: first unseen)")
    s.add_argument("--gamma", type=float, help="CFG scale; 1 disables guidance (default: cfg.gamma)")
    s.add_argument("--top-k", type=int, help="sampler.topK")
    s.add_argument("--temperature", type=float, help="sampler.temperature")
    s.add_argument("--max-frames", type=int, help="sampler.maxFrames")
    s.add_argument("--out", help="JSON-lines output (default: <out-dir>/infer.jsonl)")

    for name, helptext in (("eval", "evaluate checkpoints with repeated seeded runs"),
                           ("cfg-sweep", "evaluate one checkpoint over a range of CFG scales")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--ckpt", action="append", help="checkpoint (repeatable for eval; "
                                                        "default: <checkpoints>/base.ckpt)")
        s.add_argument("--split", choices=["seen", "unseen"], help="speaker split (default: data.evalSplit)")
        s.add_argument("--items", type=int, help="evaluation items (default: data.evalItems)")
        s.add_argument("--runs", type=int, help="seeded repeats (default: data.evalRuns)")
        s.add_argument("--out", help="CSV output")
        if name == "eval":
            s.add_argument("--gamma", type=_floats, help="CFG scale(s), comma-separated (default: cfg.gamma)")
        else:
            s.add_argument("--gammas", type=_floats, help="comma-separated scales (default 1.0..3.0 step 0.2)")
    return p


def _resolve(args) -> tuple[RunConfig, Path]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"rootSeed={args.seed}")
    rc = load(args.config, overrides)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return rc, out


def _path(out: Path, sub: str, name: str, given: str | None) -> Path:
    if given:
        return Path(given)
    p = out / sub / name
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_make_world(args, rc: RunConfig, out: Path) -> None:
    path = _path(out, rc.paths.datasets, "train.jsonl", args.out)
    corpus = pipeline.make_training_corpus(rc)
    write_utterances(path, rc.world, corpus)
    print(f"wrote {len(corpus)} utterances to {path}")


def cmd_train(args, rc: RunConfig, out: Path) -> None:
    if args.iters is not None:
        rc = replace(rc, train=replace(rc.train, iters=args.iters))
    data = _path(out, rc.paths.datasets, "train.jsonl", args.data)
    if not data.exists():
        raise DomainError(f"{data} not found; run make-world first")
    spec, corpus = read_utterances(data)
    if spec != rc.world:
        raise ConfigError(f"{data} was made with a different world spec")
    logp = _path(out, rc.paths.logs, "train.csv", None)
    model = pipeline.train_base(rc, corpus, logp)
    ckpt = _path(out, rc.paths.checkpoints, "base.ckpt", args.out)
    cid = saveCheckpoint(model, ckpt, {"stage": "base", "rootSeed": rc.rootSeed})
    (out / "config.cfg").write_text(dumps(rc))
    print(f"wrote {ckpt} ({cid}) and {logp}")


def _load(path: Path, rc: RunConfig):
    if not path.exists():
        raise DomainError(f"checkpoint {path} not found")
    return loadCheckpoint(path, rc.model)


def cmd_gen_prefs(args, rc: RunConfig, out: Path) -> None:
    mode = args.mode or rc.align.method
    base = _load(_path(out, rc.paths.checkpoints, "base.ckpt", args.base), rc)
    gt = args.gt_as_chosen or rc.data.gtAsChosen
    pairs = pipeline.generate_preferences(rc, base, mode, gt, args.samples_per_prompt)
    name = f"prefs_{'gt' if gt else mode}.jsonl"
    path = _path(out, rc.paths.datasets, name, args.out)
    write_pairs(path, pairs, {"mode": mode, "gtAsChosen": gt, "base": base.checkpoint_id,
                              "rootSeed": rc.rootSeed})
    print(f"wrote {len(pairs)} pairs to {path}")


def cmd_align(args, rc: RunConfig, out: Path) -> None:
    a = rc.align
    a = replace(a, method=args.method or a.method,
                beta=a.beta if args.beta is None else args.beta,
                eta=a.eta if args.eta is None else args.eta,
                learningRate=a.learningRate if args.lr is None else args.lr,
                maxIters=a.maxIters if args.iters is None else args.iters)
    rc = replace(rc, align=a)
    base = _load(_path(out, rc.paths.checkpoints, "base.ckpt", args.base), rc)
    pairs_path = _path(out, rc.paths.datasets, f"prefs_{a.method}.jsonl", args.pairs)
    if not pairs_path.exists():
        raise DomainError(f"preference dataset {pairs_path} not found; run gen-prefs first")
    _, pairs = read_pairs(pairs_path, rc.model.N)
    policy, rows = pipeline.align(rc, base, pairs, a.method)
    logp = _path(out, rc.paths.logs, f"align_{a.method}.csv", None)
    write_csv(logp, rows, ["iter", "train_loss", "val_loss", "mean_delta"])
    ckpt = _path(out, rc.paths.checkpoints, f"{a.method}.ckpt", args.out)
    cid = saveCheckpoint(policy, ckpt, {"stage": a.method, "base": base.checkpoint_id, "rootSeed": rc.rootSeed})
    print(f"wrote {ckpt} ({cid}) and {logp}")


def cmd_infer(args, rc: RunConfig, out: Path) -> None:
    s = rc.sampler
    s = replace(s, topK=args.top_k or s.topK, temperature=args.temperature or s.temperature,
                maxFrames=args.max_frames or s.maxFrames, rngSeed=rc.seed("infer"))
    gamma = rc.cfg.gamma if args.gamma is None else args.gamma
    guidance = CfgConfig(gamma=gamma) if rc.cfg.enabled and gamma != 1 else None
    model = _load(_path(out, rc.paths.checkpoints, "base.ckpt", args.ckpt), rc)
    world = pipeline.world_of(rc)
    speaker = world.unseen_speakers()[0] if args.speaker is None else args.speaker
    if not 0 <= speaker < rc.world.totalSpeakers:
        raise DomainError(f"speaker {speaker} out of range")
    for t in args.text:
        if not t or min(t) < 0 or max(t) >= rc.world.alphabetSize:
            raise DomainError(f"text {t} is empty or has symbols outside the alphabet")
    rng = np.random.default_rng(rc.seed("infer-context"))
    src = generateRegularTexts(rc.world, 1, rc.seed("infer-context"))[0]
    ctx = context_slice(synthesize(world, src, speaker, rc.seed("infer-context")), rc.model.contextFrames, rng)
    conds = [make_cond(model.cfg, world, t, ctx) for t in args.text]
    gens = generate_batch(model, conds, s, guidance, [item_rng(s.rngSeed, i) for i in range(len(conds))],
                          [frame_budget(rc.world, t) for t in args.text])
    path = Path(args.out) if args.out else out / "infer.jsonl"
    with open(path, "w") as fh:
        for t, g in zip(args.text, gens):
            decoded = mockAsrDecode(world, g.grid)
            c, w = cerWer(decoded, t)
            rec = {"text": t, "speaker": speaker, "gamma": gamma, "grid": g.grid.tolist(),
                   "truncated": g.truncated, "decoded": decoded, "cer": c, "wer": w,
                   "ssim": ssim_proxy(world, ctx, g.grid)}
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(gens)} generations to {path}")


def _fmt(v):
    if v is None:
        return ""
    return f"{v:.6f}" if isinstance(v, float) else v


def cmd_eval(args, rc: RunConfig, out: Path) -> None:
    ckpts = args.ckpt or [str(out / rc.paths.checkpoints / "base.ckpt")]
    gammas = args.gamma or [rc.cfg.gamma]
    split = pipeline.eval_split(rc, args.split, args.items)
    reports, labels = [], []
    for c in ckpts:
        model = _load(Path(c), rc)
        for g in gammas:
            reports.append(pipeline.evaluate(rc, model, split, g, args.runs))
            labels.append(f"{Path(c).stem} g={g:g}")
    print(format_table(reports, labels))
    path = Path(args.out) if args.out else out / "eval.csv"
    rows = []
    for lab, r in zip(labels, reports):
        row = r.row()
        rows.append({"setting": lab, **{k: _fmt(row[k]) for k in
                     ("split", "runs", "gamma", "cer_mean", "cer_ci", "wer_mean", "wer_ci", "ssim_mean", "ssim_ci")}})
    write_csv(path, rows, list(rows[0]))


def cmd_cfg_sweep(args, rc: RunConfig, out: Path) -> None:
    ckpt = (args.ckpt or [str(out / rc.paths.checkpoints / "base.ckpt")])[0]
    model = _load(Path(ckpt), rc)
    split = pipeline.eval_split(rc, args.split, args.items)
    reports = pipeline.sweep(rc, model, split, args.gammas, args.runs)
    print(format_table(reports))
    path = Path(args.out) if args.out else out / "cfg_sweep.csv"
    rows = [{k: _fmt(v) for k, v in r.items()} for r in sweep_rows(reports)]
    write_csv(path, rows, ["gamma", "cer_mean", "cer_ci", "ssim_mean", "ssim_ci"])


COMMANDS = {
    "make-world": cmd_make_world,
    "train": cmd_train,
    "gen-prefs": cmd_gen_prefs,
    "align": cmd_align,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "cfg-sweep": cmd_cfg_sweep,
}


def cliMain(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc, out = _resolve(args)
        pipeline.setup_torch()
        COMMANDS[args.command](args, rc, out)
    except (DomainError, ConfigError, CheckpointError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        log.exception("internal error")
        return 2
    return 0


def main() -> None:
    sys.exit(cliMain())


if __name__ == "__main__":
    main()
