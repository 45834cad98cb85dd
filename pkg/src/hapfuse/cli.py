"""``hapfuse`` command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__
from .config import FUSION_MODES, ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_run_meta(out: Path, command: str, cfg_hash: str | None, seeds: dict, started: float) -> None:
    meta = {"command": command, "config_hash": cfg_hash, "seeds": seeds, "version": __version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args):
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "mode", None):
        overrides.setdefault("model", {})["fusion"] = args.mode
    if getattr(args, "exec_slice", None):
        overrides.setdefault("model", {})["exec_slice"] = args.exec_slice
    if getattr(args, "trials", None) is not None:
        overrides.setdefault("eval", {})["trials"] = args.trials
    if getattr(args, "seed", None) is not None and args.command in ("train", "pretrain", "ablate"):
        overrides.setdefault("train", {})["seed"] = args.seed
    return cfg.with_(**overrides).validate() if overrides else cfg


def _require_path(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _checkpoint_config(args, ckpt):
    """Checkpoint config with eval-time overrides from the command line."""
    cfg = ckpt.config
    if args.config:
        override = load_config(args.config)
        cfg = cfg.with_(world=override.world.__dict__, eval=override.eval.__dict__, mi=override.mi.__dict__)
    overrides = {}
    if args.exec_slice:
        overrides["model"] = {"exec_slice": args.exec_slice}
    if args.trials is not None:
        overrides["eval"] = {"trials": args.trials}
    if args.seed is not None:
        overrides.setdefault("eval", {})["seed"] = args.seed
    return cfg.with_(**overrides).validate() if overrides else cfg


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .world import generate_dataset

    cfg = _config(args)
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    started = time.time()
    manifest = generate_dataset(cfg.world, args.episodes, seed, out)
    _write_run_meta(out, "gen-data", cfg.digest(), {"world": seed}, started)
    print(f"wrote {manifest['n_episodes']} episodes ({manifest['total_steps']} steps) to {out}; "
          f"digest {manifest['digest'][:16]}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .storage import save_checkpoint
    from .training import encoder_arrays, fit_stats, load_features, pretrain_audio_proprio

    cfg = _config(args)
    data = _require_path(args.data, "data")
    out = _out_dir(args)
    started = time.time()
    features = load_features(data, cfg)
    policy, losses = pretrain_audio_proprio(features, cfg, cfg.train.seed, fit_stats(features))
    save_checkpoint(out / "encoders.ckpt", cfg.to_text(),
                    {"kind": "encoders", "steps": len(losses), "version": __version__},
                    encoder_arrays(policy))
    (out / "pretrain_metrics.tsv").write_text("".join(f"{i}\t{l!r}\t{cfg.train.lr!r}\n"
                                                      for i, l in enumerate(losses)))
    _write_run_meta(out, "pretrain", cfg.digest(), {"train": cfg.train.seed}, started)
    print(f"pretrained encoders for {len(losses)} steps; final loss {losses[-1] if losses else float('nan'):.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .storage import load_checkpoint
    from .training import load_features, train

    cfg = _config(args)
    data = _require_path(args.data, "data")
    out = _out_dir(args)
    started = time.time()
    init = None
    if args.init_encoders:
        init = load_checkpoint(_require_path(args.init_encoders, "init-encoders"))[2]
    resume = _require_path(args.resume, "resume") if args.resume else None
    features = load_features(data, cfg)
    result = train(features, cfg, cfg.train.seed, out, mode=cfg.model.fusion, resume=resume,
                   init_encoders=init)
    from .plotting import loss_curves

    loss_curves({cfg.model.fusion: out / "metrics.tsv"}, out / "loss.png")
    _write_run_meta(out, "train", cfg.digest(), {"train": cfg.train.seed}, started)
    print(f"trained {cfg.model.fusion} for {cfg.train.steps} steps; checkpoint {result.checkpoint}")
    return EXIT_OK


def _emit_eval(out: Path, reports, stem: str, title: str = "") -> None:
    from .analysis import write_eval_tsv, write_summary
    from .plotting import metric_bars

    write_eval_tsv(out / f"{stem}.tsv", reports)
    write_summary(out / f"{stem}.json", {"reports": [r.to_dict() for r in reports]})
    labels = [f"{r.method} {r.label}".strip() for r in reports]
    metric_bars(labels, [r.mean for r in reports], [r.std for r in reports], out / f"{stem}.png",
                title=title)
    for r in reports:
        print(f"{r.method}\t{r.label}\tmean={r.mean:.6f}\tstd={r.std:.6f}\tn={r.n_trials}")


def cmd_eval(args) -> int:
    from .agent import ExpertAgent, PolicyAgent
    from .analysis import run_eval, trial_seeds
    from .training import read_policy_checkpoint

    out = _out_dir(args)
    started = time.time()
    if args.expert:
        cfg = _config(args)
        agent = ExpertAgent(cfg)
    else:
        ckpt = read_policy_checkpoint(_require_path(args.checkpoint, "checkpoint"))
        cfg = _checkpoint_config(args, ckpt)
        ckpt.config = cfg
        agent = PolicyAgent(ckpt)
    seeds = trial_seeds(cfg.eval.seed, cfg.eval.trials)
    report = run_eval(agent, cfg.world, seeds=seeds, exec_slice=cfg.model.exec_slice)
    _emit_eval(out, [report], "eval")
    _write_run_meta(out, "eval", cfg.digest(), {"eval": cfg.eval.seed, "trials": seeds}, started)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .analysis import ablation_suite
    from .training import load_features

    cfg = _config(args)
    data = _require_path(args.data, "data")
    out = _out_dir(args)
    started = time.time()
    modes = args.modes.split(",") if args.modes else list(FUSION_MODES)
    bad = [m for m in modes if m not in FUSION_MODES]
    if bad:
        raise UsageError(f"unknown fusion mode(s) {bad}")
    train_seeds = [int(s) for s in args.train_seeds.split(",")] if args.train_seeds else None
    features = load_features(data, cfg)
    result = ablation_suite(features, cfg, modes, out, train_seeds)
    _emit_eval(out, result.reports + result.combined, "ablation", "fusion ablation")
    from .analysis import write_summary

    write_summary(out / "ablation_flags.json", {"ordering": result.ordering_flags(),
                                                "checkpoints": result.checkpoints})
    for flag, ok in result.ordering_flags().items():
        print(f"{flag}\t{ok}")
    _write_run_meta(out, "ablate", cfg.digest(),
                    {"train": train_seeds or [cfg.train.seed], "eval": cfg.eval.seed}, started)
    return EXIT_OK


def cmd_generalize(args) -> int:
    from .agent import PolicyAgent
    from .analysis import generalization_suite, write_summary
    from .training import read_policy_checkpoint

    out = _out_dir(args)
    started = time.time()
    ckpt = read_policy_checkpoint(_require_path(args.checkpoint, "checkpoint"))
    cfg = _checkpoint_config(args, ckpt)
    ckpt.config = cfg
    variants = [int(v) for v in args.variants.split(",")] if args.variants else [0, *cfg.eval.variants]
    rows = generalization_suite(PolicyAgent(ckpt), variants, cfg)
    _emit_eval(out, [r.report for r in rows], "generalization", "container variants")
    write_summary(out / "degradation.json", {str(r.variant): r.degradation for r in rows})
    _write_run_meta(out, "generalize", cfg.digest(), {"eval": cfg.eval.seed}, started)
    return EXIT_OK


def cmd_mi(args) -> int:
    from .agent import PolicyAgent
    from .analysis import mi_suite, write_mi_tsv, write_summary
    from .plotting import mi_bars
    from .training import read_policy_checkpoint

    out = _out_dir(args)
    started = time.time()
    if not args.checkpoints:
        raise UsageError("at least one checkpoint is required")
    agents, cfg = {}, None
    for path in args.checkpoints:
        ckpt = read_policy_checkpoint(_require_path(path, "checkpoint"))
        ckpt.config = _checkpoint_config(args, ckpt)
        cfg = cfg or ckpt.config
        agents[ckpt.mode if ckpt.mode not in agents else f"{ckpt.mode}:{path}"] = PolicyAgent(ckpt)
    rows = mi_suite(agents, cfg, args.rollouts)
    write_mi_tsv(out / "mi.tsv", rows)
    write_summary(out / "mi.json", {"rows": [r.__dict__ for r in rows]})
    mi_bars([r.method for r in rows], [r.mi for r in rows], out / "mi.png")
    for r in rows:
        print(f"{r.method}\tmi={r.mi:.6f}\tn={r.n_samples}\t{'ok' if r.valid else r.error}")
    _write_run_meta(out, "mi", cfg.digest(), {"eval": cfg.eval.seed}, started)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .analysis import read_eval_tsv
    from .plotting import loss_curves, metric_bars, mi_bars

    src = _require_path(args.input, "input")
    out = _out_dir(args)
    written = []
    for tsv in sorted(src.rglob("*.tsv")):
        header = tsv.read_text(encoding="utf-8").split("\n", 1)[0]
        stem = tsv.relative_to(src).with_suffix("").as_posix().replace("/", "_")
        if header.startswith("method\tlabel"):
            rows = read_eval_tsv(tsv)
            written.append(metric_bars([f"{r['method']} {r['label']}".strip() for r in rows],
                                       [float(r["mean"]) for r in rows], [float(r["std"]) for r in rows],
                                       out / f"{stem}.png"))
        elif header.startswith("method\tk"):
            rows = read_eval_tsv(tsv)
            written.append(mi_bars([r["method"] for r in rows], [float(r["mi_nats"]) for r in rows],
                                   out / f"{stem}.png"))
    curves = {p.parent.name or "run": p for p in sorted(src.rglob("metrics.tsv"))}
    if curves:
        written.append(loss_curves(curves, out / "loss_curves.png"))
    for path in written:
        print(path)
    return EXIT_OK


def cmd_metric(args) -> int:
    from .analysis import CABINET_WEIGHTS, cabinet_score

    weights = args.weights or list(CABINET_WEIGHTS)
    try:
        score = cabinet_score(args.d_slide, args.d_disp, args.theta_rot, *weights)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{score:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hapfuse", description="Audio/vision/proprio fusion policies on synthetic tasks.")
    parser.add_argument("--version", action="version", version=f"hapfuse {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="root seed")
        return p

    p = common(sub.add_parser("gen-data", help="generate scripted-expert episodes"))
    p.add_argument("--episodes", "-n", type=int, default=50)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("pretrain", help="pretrain audio/proprio encoders"))
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("train", help="train a diffusion policy"))
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--mode", choices=FUSION_MODES)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--init-encoders", help="pretrained encoder checkpoint")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("generalize", cmd_generalize, "zero-shot container variants")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--checkpoint", help="policy checkpoint")
        p.add_argument("--exec-slice", choices=("first", "last"))
        p.add_argument("--trials", type=int)
        if name == "eval":
            p.add_argument("--expert", action="store_true", help="evaluate the scripted expert")
        else:
            p.add_argument("--variants", help="comma-separated variant ids (0 = base)")
        p.set_defaults(func=func)

    p = common(sub.add_parser("ablate", help="train and evaluate several fusion modes"))
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--modes", help="comma-separated fusion modes (default: all)")
    p.add_argument("--train-seeds", help="comma-separated training seeds")
    p.add_argument("--trials", type=int)
    p.add_argument("--exec-slice", choices=("first", "last"))
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("mi", help="latent/outcome mutual information per checkpoint"))
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--rollouts", type=int)
    p.add_argument("--exec-slice", choices=("first", "last"))
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_mi)

    p = sub.add_parser("plot", help="render figures from report and metrics files")
    p.add_argument("--input", help="directory with report files")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("metric", help="cabinet score from measured quantities")
    p.add_argument("d_slide", type=float)
    p.add_argument("d_disp", type=float)
    p.add_argument("theta_rot", type=float)
    p.add_argument("--weights", type=float, nargs=3, metavar=("ALPHA", "BETA", "GAMMA"))
    p.set_defaults(func=cmd_metric)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a command is required (see --help)")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"hapfuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # one-line diagnostic for any runtime failure
        print(f"hapfuse: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
