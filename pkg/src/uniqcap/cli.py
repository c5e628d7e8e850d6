"""Command-line entry point: synth, train-surrogate, search, eval, bench, run.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import _backend
from .config import PipelineConfig, merge
from .embedding import PromptBank
from .errors import InvalidInputError, UniqcapError
from .evaluation import MACRO, MICRO, TIMELOOP_SET_SIZES, chance_baseline, evaluate_assignments
from .formats import read_embeddings, read_json, read_tensor, write_embeddings, write_json, write_tensor
from .oracle import PROFILES, TensorOracle, synth_generate
from .search import PER_CLIP, UNIFORM, PromptAssignment, assemble_caption, margin, select_prompts

EMBEDDINGS = "embeddings.cdpe"
TENSOR = "tensor.cdpt"
GROUND_TRUTH = "ground_truth.json"
MODEL = "model.cdpn"
LOSSES = "losses.json"
ASSIGNMENTS = "assignments.jsonl"
SUMMARY = "summary.json"
REPORT = "report.json"

S = argparse.SUPPRESS


class UsageError(Exception):
    pass


def _mode(value: str) -> str:
    modes = {"per-clip": PER_CLIP, "per_clip": PER_CLIP, "uniform": UNIFORM}
    if value not in modes:
        raise argparse.ArgumentTypeError("mode must be per-clip or uniform")
    return modes[value]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=S, help="JSON config file (overridden by flags)")
    p.add_argument("--seed", dest="seed", type=int, default=S)
    p.add_argument("--out", dest="paths.out", default=S, help="output directory")


def _add_search(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", dest="search.alpha", type=int, default=S)
    p.add_argument("--lambda", dest="search.lam", type=float, default=S)
    p.add_argument("--tau-max", dest="search.tau_max", type=int, default=S)
    p.add_argument("--mode", dest="search.mode", type=_mode, default=S, metavar="{per-clip,uniform}")


def _add_synth(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-clips", dest="synth.n_clips", type=int, default=S)
    p.add_argument("--n-prompts", dest="synth.n_prompts", type=int, default=S)
    p.add_argument("--n-advances", dest="synth.n_advances", type=int, default=S)
    p.add_argument("--dim", dest="synth.dim", type=int, default=S)
    p.add_argument("--profile", dest="synth.profile", choices=PROFILES, default=S)
    p.add_argument("--noise-scale", dest="synth.noise_scale", type=float, default=S)
    p.add_argument("--min-margin", dest="synth.min_margin", type=float, default=S)


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", dest="train.epochs", type=int, default=S)
    p.add_argument("--lr", dest="train.lr", type=float, default=S)
    p.add_argument("--batch-size", dest="train.batch_size", type=int, default=S)
    p.add_argument("--model-dim", dest="model.model_dim", type=int, default=S)
    p.add_argument("--n-layers", dest="model.n_layers", type=int, default=S)
    p.add_argument("--n-heads", dest="model.n_heads", type=int, default=S)
    p.add_argument("--ff-dim", dest="model.ff_dim", type=int, default=S)


def _add_inputs(p: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        p.add_argument(f"--{name}", dest=f"paths.{name}", default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniqcap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic instance with ground truth")
    _add_common(p)
    _add_synth(p)

    p = sub.add_parser("train-surrogate", help="fit the similarity predictor to a tensor")
    _add_common(p)
    _add_inputs(p, "tensor", "embeddings")
    _add_train(p)

    p = sub.add_parser("search", help="select prompt combinations for every clip")
    _add_common(p)
    _add_inputs(p, "tensor", "embeddings", "model")
    _add_search(p)
    p.add_argument("--no-verify", dest="verify", action="store_false", default=S)
    p.add_argument("--backend", choices=sorted(_backend.BACKENDS), default=None)

    p = sub.add_parser("eval", help="retrieval metrics for assignments, or the chance harness")
    _add_common(p)
    _add_inputs(p, "tensor", "assignments", "sets")
    p.add_argument("--averaging", dest="averaging", choices=(MACRO, MICRO), default=S)
    p.add_argument("--chance-trials", type=int, default=None,
                   help="run the random-similarity baseline with this many trials")
    p.add_argument("--set-sizes", default="10",
                   help="comma-separated set sizes for the chance harness, or 'timeloop'")

    p = sub.add_parser("bench", help="time the search backends")
    p.add_argument("--n-clips", type=int, default=483)
    p.add_argument("--n-prompts", type=int, default=10)
    p.add_argument("--alpha", type=int, default=3)
    p.add_argument("--tau", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=sorted(_backend.BACKENDS), action="append")
    p.add_argument("--scaling", action="store_true", help="also report work for N in 50..400")

    p = sub.add_parser("run", help="full pipeline: synth, [train], search, verify, eval")
    _add_common(p)
    _add_synth(p)
    _add_search(p)
    _add_train(p)
    p.add_argument("--surrogate", action="store_true", help="search on surrogate predictions")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults < --config file < explicit flags."""
    values = vars(args)
    cfg = PipelineConfig.load(values["config"]) if "config" in values else PipelineConfig()
    flags = {k: v for k, v in values.items() if "." in k or k in ("seed", "verify", "averaging")}
    if "train.epochs" in flags:
        epochs = flags["train.epochs"]
        flags["train.milestones"] = (round(epochs * 0.6), round(epochs * 0.8))
    return merge(cfg, flags)


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path: Optional[str], flag: str) -> str:
    if path is None:
        raise UsageError(f"--{flag} is required")
    return path


def _log(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: PipelineConfig) -> dict:
    s = cfg.synth
    inst = synth_generate(
        s.n_clips, s.n_prompts, s.n_advances, s.dim, s.profile, s.noise_scale,
        seed=cfg.sub_seed("generation"), alpha=cfg.search.alpha, min_margin=s.min_margin,
    )
    out = _out_dir(cfg)
    write_embeddings(out / EMBEDDINGS, inst.clips, inst.bank.prompts)
    write_tensor(out / TENSOR, inst.tensor(), inst.captions)
    write_json(out / GROUND_TRUTH, inst.ground_truth_record())
    n_insep = sum(g is None for g in inst.ground_truth)
    _log(f"synth: {s.n_clips} clips, {s.n_prompts} prompts, {s.n_advances} advances, "
         f"{n_insep} inseparable -> {out}")
    return {"embeddings": str(out / EMBEDDINGS), "tensor": str(out / TENSOR)}


def cmd_train(cfg: PipelineConfig) -> dict:
    from .surrogate import init_model, mse, samples_from_tensor, save_checkpoint, train

    tensor, _ = read_tensor(_need(cfg.paths.tensor, "tensor"))
    clips, _ = read_embeddings(_need(cfg.paths.embeddings, "embeddings"))
    if clips.clip_ids != tensor.ids():
        raise InvalidInputError("embeddings and tensor list different clips")
    m = cfg.model
    model = init_model(clips.dim, tensor.n_prompts, m.model_dim, seed=cfg.sub_seed("init"),
                       n_layers=m.n_layers, n_heads=m.n_heads, ff_dim=m.ff_dim)
    samples = samples_from_tensor(clips, tensor)
    train_cfg = merge(cfg.train, {"seed": cfg.sub_seed("batching")})
    model, losses = train(model, samples, train_cfg)
    out = _out_dir(cfg)
    save_checkpoint(out / MODEL, model)
    final = mse(model, samples)
    write_json(out / LOSSES, {"epoch_loss": losses, "final_mse": final, "n_samples": len(samples)})
    _log(f"train-surrogate: {len(samples)} cells, {train_cfg.epochs} epochs, final MSE {final:.3g} -> {out / MODEL}")
    return {"model": str(out / MODEL), "final_mse": final}


def _verify(exact, assignments, lam) -> List[str]:
    """Clip ids whose unique flag disagrees with the exact tensor."""
    ids = exact.ids()
    bad = []
    for a in assignments:
        i = ids.index(a.clip_id)
        if (margin(exact, i, a.combination) > lam) != a.unique:
            bad.append(a.clip_id)
    return bad


def cmd_search(cfg: PipelineConfig, backend: Optional[str] = None) -> dict:
    exact, captions = None, None
    if cfg.paths.tensor is not None:
        exact, meta = read_tensor(cfg.paths.tensor)
        captions = meta.get("captions")
    if cfg.paths.model is not None:
        from .surrogate import load_checkpoint, predict_tensor

        clips, emeta = read_embeddings(_need(cfg.paths.embeddings, "embeddings"))
        model = load_checkpoint(cfg.paths.model)
        prompts = emeta.get("prompts") or [f"prompt-{k}" for k in range(model.n_prompts)]
        tensor = predict_tensor(model, clips, PromptBank(tuple(prompts)))
    elif exact is not None:
        tensor = exact
    else:
        raise UsageError("search needs --tensor, or --model with --embeddings")
    if exact is not None and exact.ids() != tensor.ids():
        raise InvalidInputError("exact tensor and embeddings list different clips")

    stats: dict = {}
    assignments = select_prompts(tensor, cfg.search, backend=backend, stats=stats)
    prompts = tensor.prompts
    out = _out_dir(cfg)
    text = TensorOracle(exact.values, captions, exact.ids()) if captions is not None else None
    with open(out / ASSIGNMENTS, "w") as fh:
        for i, a in enumerate(assignments):
            caption = assemble_caption(a, text, i) if text is not None else None
            fh.write(json.dumps(a.to_record(prompts, caption), sort_keys=True) + "\n")

    n = len(assignments)
    n_unique = sum(a.unique for a in assignments)
    summary = {
        "n_clips": n,
        "unique": n_unique,
        "non_unique": n - n_unique,
        "unique_pct": round(100.0 * n_unique / n, 1),
        "mean_elements": round(float(np.mean([a.combination.size for a in assignments])), 4),
        "mean_advance": round(float(np.mean([a.advance_used for a in assignments])), 4),
        "evaluations": stats["evaluations"],
        "exhausted": sum(b == cfg.search.tau_max and not a.unique
                         for a, b in zip(assignments, stats["budgets"])),
        "provenance": tensor.provenance,
        "search": {"alpha": cfg.search.alpha, "lambda": cfg.search.lam,
                   "tau_max": cfg.search.tau_max, "mode": cfg.search.mode},
    }
    if cfg.verify and exact is not None and tensor is not exact:
        bad = _verify(exact, assignments, cfg.search.lam)
        summary["verification"] = {"checked": n, "discrepancies": bad}
    write_json(out / SUMMARY, summary)
    line = (f"search: {n} clips, {n_unique} unique ({summary['unique_pct']}%), {n - n_unique} not unique, "
            f"mean {summary['mean_elements']:.2f} prompts")
    if "verification" in summary:
        line += f", {len(summary['verification']['discrepancies'])} verification discrepancies"
    _log(line)
    return summary


def _read_assignments(path) -> List[PromptAssignment]:
    try:
        with open(path) as fh:
            return [PromptAssignment.from_record(json.loads(line)) for line in fh if line.strip()]
    except FileNotFoundError:
        raise InvalidInputError(f"assignments file not found: {path}") from None
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"malformed assignment record in {path}: {exc}") from None


def cmd_eval(cfg: PipelineConfig, chance_trials: Optional[int] = None, set_sizes: str = "10",
             averaging_given: bool = False) -> dict:
    out = _out_dir(cfg)
    if chance_trials is not None:
        if set_sizes.strip() == "timeloop":
            sizes = TIMELOOP_SET_SIZES
        else:
            try:
                sizes = tuple(int(x) for x in set_sizes.split(","))
            except ValueError:
                raise UsageError(f"--set-sizes must be integers or 'timeloop', got {set_sizes!r}") from None
        averaging = cfg.averaging if averaging_given else MICRO
        report = chance_baseline(sizes, chance_trials, cfg.sub_seed("chance"), averaging)
    else:
        tensor, _ = read_tensor(_need(cfg.paths.tensor, "tensor"))
        found = _read_assignments(_need(cfg.paths.assignments, "assignments"))
        sets = read_json(cfg.paths.sets, "sets") if cfg.paths.sets else None
        report = evaluate_assignments(tensor, {a.clip_id: a for a in found}, sets, cfg.averaging)
    data = report.to_dict()
    write_json(out / REPORT, data)
    _log("eval: " + " ".join(f"{k}={data[k]}" for k in report.FIELDS))
    return data


def cmd_bench(args: argparse.Namespace) -> List[dict]:
    from .bench import compare_backends, work_scaling

    rows = compare_backends(args.n_clips, args.n_prompts, args.alpha, args.tau,
                            args.repeats, args.seed, args.backend)
    for r in rows:
        _log(f"bench: backend={r['backend']} N={r['n_clips']} P={args.n_prompts} alpha={args.alpha} "
             f"tau={args.tau} seconds={r['seconds']:.4f} evaluations={r['evaluations']}")
    if args.scaling:
        for r in work_scaling(n_prompts=args.n_prompts, alpha=args.alpha, seed=args.seed):
            _log(f"scaling: N={r['n_clips']} evaluations={r['evaluations']} "
                 f"per_clip={r['per_clip_work']:.1f} seconds={r['seconds']:.4f}")
    return rows


def cmd_run(cfg: PipelineConfig, surrogate: bool = False) -> dict:
    out = _out_dir(cfg)

    def with_paths(c, **names):
        return merge(c, {f"paths.{k}": str(out / v) for k, v in names.items()})

    # recorded relative to the artifact directory so reruns elsewhere match
    merge(cfg, {"paths.out": "."}).save(out / "config.json")
    cmd_synth(cfg)
    cfg = with_paths(cfg, embeddings=EMBEDDINGS, tensor=TENSOR)
    if surrogate:
        cmd_train(cfg)
        cfg = with_paths(cfg, model=MODEL)
    summary = cmd_search(cfg)
    cfg = with_paths(cfg, assignments=ASSIGNMENTS)
    report = cmd_eval(cfg)
    return {"summary": summary, "report": report}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bench":
            cmd_bench(args)
            return 0
        try:
            cfg = resolve_config(args)
        except InvalidInputError as exc:
            parser.error(str(exc))
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train-surrogate":
            cmd_train(cfg)
        elif args.command == "search":
            cmd_search(cfg, args.backend)
        elif args.command == "eval":
            cmd_eval(cfg, args.chance_trials, args.set_sizes, "averaging" in vars(args))
        elif args.command == "run":
            cmd_run(cfg, args.surrogate)
    except UsageError as exc:
        parser.error(str(exc))
    except (UniqcapError, OSError) as exc:
        print(f"uniqcap: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
