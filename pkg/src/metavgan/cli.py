"""Command-line entry point: ``metavgan {gen-data,validate-data,train,eval,synth}``.

Run settings live in :class:`RunConfig`. A ``--config`` file is a flat YAML
mapping from RunConfig field names to values; command-line flags override it.
``train`` writes the merged config to ``<out>/config.yaml`` before it starts,
and that file alone reproduces the run (``metavgan train --config
<out>/config.yaml``).

Every random choice derives from ``--seed``:

* few-shot selection: ``numpy.random.default_rng(seed)``
* parameter init, task sampling, loss noise: ``make_rng(seed, 0|1|2)``
* evaluation synthesis ``make_rng(seed, 3)``, classifier init ``default_rng(seed)``
* ``synth`` sampling: ``make_rng(seed, 4)``

Exit codes: 0 success, 2 configuration or data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import datasets as ds
from . import genmodel as gm
from . import metatrain as mt
from . import zsleval as ev
from .episodes import ConfigError, EpisodeConfig, save_selection, subsample_fewshot
from .neural import make_rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

CONFIG_FILE = "config.yaml"
CHECKPOINT_FILE = "checkpoint.ckpt"
TRACE_FILE = "trace.tsv"
SELECTION_FILE = "selection.txt"
FALLBACK_LATENT_DIM = 8
SYNTH_STREAM = 4


@dataclass
class RunConfig:
    dataset_dir: str = "data/synthetic"
    out: str = "runs/default"
    seed: int = 0
    shots: str = "5"  # "5", "10" or "all"
    # model; latent_dim None picks the per-benchmark size from the bundle name
    latent_dim: Optional[int] = None
    encoder_hidden: list = field(default_factory=lambda: [1024, 512])
    decoder_hidden: list = field(default_factory=lambda: [1024])
    disc_hidden: list = field(default_factory=lambda: [1024, 512])
    dropout_rate: float = 0.3
    disc_mode: str = "critic"
    clip_value: Optional[float] = 0.01
    de_term_z: str = "posterior"
    # episodes
    n_way_tr: int = 10
    k_shot_tr: int = 5
    n_way_v: int = 10
    k_shot_v: int = 3
    val_from_full: bool = False
    # meta-training
    eta1: float = 1e-4
    eta2: float = 1e-4
    inner_steps: int = 3
    task_batch_size: int = 4
    outer_steps: int = 2000
    outer_optimizer: str = "adam"
    outer_lr: float = 1e-3
    lambda_adv: float = 1.0
    literal_eq4: bool = False
    dropout: bool = True
    meta_enabled: bool = True
    meta_on_generator: bool = True
    meta_on_discriminator: bool = True
    disjoint_tasks: bool = True
    cvae_only: bool = False
    checkpoint_every: int = 0
    # evaluation
    eval_per_class: int = 300
    eval_epochs: int = 200
    eval_lr: float = 0.01

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.check()
        return cfg

    def check(self) -> None:
        if str(self.shots) not in ("5", "10", "all"):
            raise ConfigError(f"shots must be 5, 10 or all, got {self.shots!r}")
        self.shots = str(self.shots)

    @property
    def shot_count(self) -> Optional[int]:
        return None if self.shots == "all" else int(self.shots)

    def model_config(self, bundle: ds.DatasetBundle) -> gm.ModelConfig:
        latent = self.latent_dim or FALLBACK_LATENT_DIM
        return gm.ModelConfig(bundle.feature_dim, bundle.attr_dim, latent, tuple(self.encoder_hidden),
                              tuple(self.decoder_hidden), tuple(self.disc_hidden), self.dropout_rate,
                              self.disc_mode, self.clip_value, self.de_term_z)

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(self.n_way_tr, self.k_shot_tr, self.n_way_v, self.k_shot_v, self.seed,
                             self.val_from_full)

    def meta_config(self) -> mt.MetaConfig:
        names = {f.name for f in fields(mt.MetaConfig)}
        return mt.MetaConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_yaml(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=False)


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return data


def resolve_run_config(args) -> RunConfig:
    data = load_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed, "dataset_dir": args.dataset_dir, "shots": args.shots,
        "outer_steps": args.outer_steps, "out": args.out,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_meta:
        data["meta_enabled"] = False
    if args.standard_split:
        data["disjoint_tasks"] = False
    if args.cvae_only:
        data["cvae_only"] = True
    if args.no_meta_disc:
        data["meta_on_discriminator"] = False
    return RunConfig.from_mapping(data)


def _say(msg: str) -> None:
    print(msg, flush=True)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = ds.SyntheticBenchSpec(
        n_seen=args.n_seen, n_unseen=args.n_unseen, feature_dim=args.feature_dim, attr_dim=args.attr_dim,
        cluster_std=args.cluster_std, examples_per_class=args.examples_per_class,
        test_per_seen_class=args.test_per_seen_class, seed=args.seed)
    bundle, _ = ds.make_synthetic(spec)
    ds.save_bundle(bundle, args.out)
    _say(f"wrote {bundle.name}: {len(bundle.seen_classes)} seen / {len(bundle.unseen_classes)} unseen classes, "
         f"{len(bundle.labels)} rows -> {args.out}")
    return EXIT_OK


def cmd_validate_data(args) -> int:
    b = ds.load_bundle(args.dataset_dir)
    _say(f"{b.name}: D={b.feature_dim} d_a={b.attr_dim} seen={len(b.seen_classes)} "
         f"unseen={len(b.unseen_classes)} rows={len(b.labels)} test_seen={b.test_seen.size} "
         f"test_unseen={b.test_unseen.size}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = resolve_run_config(args)
    bundle = ds.load_bundle(run.dataset_dir)
    if run.latent_dim is None:
        run.latent_dim = gm.BENCHMARK_LATENT_DIMS.get(bundle.name.upper(), FALLBACK_LATENT_DIM)
    cfg = run.model_config(bundle)
    meta = run.meta_config()
    episode = run.episode_config()

    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(run.to_yaml())
    pool = subsample_fewshot(bundle, run.shot_count, run.seed)
    save_selection(pool, out / SELECTION_FILE)

    trace_path = out / TRACE_FILE
    trace_path.write_text(mt.TRACE_HEADER + "\n")
    # the output path is left out so a rerun elsewhere writes identical bytes
    extra = {"run_config": {k: v for k, v in asdict(run).items() if k != "out"}, "dataset": bundle.name}

    def checkpoint(state, path):
        gm.save_checkpoint(gm.Checkpoint(cfg, state.params, state.optimizers, run.seed, state.step, extra), path)

    with open(trace_path, "a") as trace_fh:
        def on_step(state):
            trace_fh.write(mt.format_trace_line(state.trace[-1]) + "\n")
            trace_fh.flush()

        try:
            state = mt.train(cfg, meta, pool, run.seed, episode, on_step=on_step,
                             on_checkpoint=lambda s: checkpoint(s, out / f"checkpoint_step{s.step}.ckpt"))
        except mt.TrainingDivergence as exc:
            print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    checkpoint(state, out / CHECKPOINT_FILE)
    last = state.trace[-1] if state.trace else None
    tail = f", last outer VG loss {last[3]:.4f}" if last else ""
    _say(f"trained {state.step} outer steps{tail}; checkpoint -> {out / CHECKPOINT_FILE}")
    return EXIT_OK


def _load_for_inference(args) -> tuple[gm.Checkpoint, ds.DatasetBundle, dict]:
    ckpt = gm.load_checkpoint(args.checkpoint)
    run = dict(ckpt.extra.get("run_config", {}))
    dataset_dir = args.dataset_dir or run.get("dataset_dir")
    if not dataset_dir:
        raise ConfigError("no --dataset-dir given and the checkpoint does not record one")
    bundle = ds.load_bundle(dataset_dir)
    if (bundle.feature_dim, bundle.attr_dim) != (ckpt.config.feature_dim, ckpt.config.attr_dim):
        raise ds.DimensionMismatchError(
            f"checkpoint expects D={ckpt.config.feature_dim}, d_a={ckpt.config.attr_dim}; "
            f"bundle has D={bundle.feature_dim}, d_a={bundle.attr_dim}")
    return ckpt, bundle, run


def cmd_eval(args) -> int:
    ckpt, bundle, run = _load_for_inference(args)
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    per_class = args.per_class or run.get("eval_per_class", 300)
    epochs = run.get("eval_epochs", 200)
    lr = run.get("eval_lr", 0.01)
    gen = ev.model_generator(ckpt.config, ckpt.params)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    report = out / f"metrics_{args.mode}.tsv"
    if args.mode == "zsl":
        acc, table = ev.evaluate_zsl(gen, bundle, per_class, seed, epochs, lr)
        ev.write_report(report, {"zsl_accuracy": acc}, table)
        _say(f"ZSL accuracy: {100 * acc:.1f}")
    else:
        m = ev.evaluate_gzsl(gen, bundle, per_class, seed, epochs, lr)
        ev.write_report(report, {"unseen": m.unseen_acc, "seen": m.seen_acc, "harmonic": m.harmonic}, m.table)
        _say(f"U / S / H: {ev.format_triple(m.unseen_acc, m.seen_acc, m.harmonic)}")
    _say(f"report -> {report}")
    return EXIT_OK


def cmd_synth(args) -> int:
    ckpt, bundle, run = _load_for_inference(args)
    classes = args.classes.split(",") if args.classes else list(bundle.unseen_classes)
    unknown = [c for c in classes if c not in bundle.class_ids]
    if unknown:
        raise ds.UnknownClassError(f"classes not in the bundle: {', '.join(unknown)}")
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    rng = make_rng(seed, SYNTH_STREAM)
    feats = [gm.synthesize(ckpt.config, ckpt.params, rng, bundle.attr(c), args.n) for c in classes]
    labels = [c for c in classes for _ in range(args.n)]
    ds.write_features_csv(args.out, labels, ds.quantize(np.vstack(feats)))
    _say(f"wrote {len(labels)} synthetic rows -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metavgan", description="Meta-learned VAE-GAN feature generator for zero-shot learning")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic benchmark bundle")
    d = ds.SyntheticBenchSpec()
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--n-seen", type=int, default=d.n_seen)
    g.add_argument("--n-unseen", type=int, default=d.n_unseen)
    g.add_argument("--feature-dim", type=int, default=d.feature_dim)
    g.add_argument("--attr-dim", type=int, default=d.attr_dim)
    g.add_argument("--cluster-std", type=float, default=d.cluster_std)
    g.add_argument("--examples-per-class", type=int, default=d.examples_per_class)
    g.add_argument("--test-per-seen-class", type=int, default=d.test_per_seen_class)
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("validate-data", help="load a bundle and print a summary")
    v.add_argument("--dataset-dir", required=True)
    v.set_defaults(func=cmd_validate_data)

    t = sub.add_parser("train", help="meta-train a generator")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset-dir")
    t.add_argument("--shots", choices=["5", "10", "all"])
    t.add_argument("--outer-steps", type=int)
    t.add_argument("--out")
    t.add_argument("--no-meta", action="store_true", help="skip inner adaptation")
    t.add_argument("--standard-split", action="store_true", help="query classes drawn from the support classes")
    t.add_argument("--cvae-only", action="store_true", help="drop the adversarial terms")
    t.add_argument("--no-meta-disc", action="store_true", help="no inner adaptation of the critic")
    t.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "score a checkpoint"), ("synth", cmd_synth, "sample features")):
        e = sub.add_parser(name, help=text)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--dataset-dir")
        e.add_argument("--seed", type=int)
        if name == "eval":
            e.add_argument("--mode", choices=["zsl", "gzsl"], default="zsl")
            e.add_argument("--per-class", type=int)
            e.add_argument("--out", help="report directory (default: next to the checkpoint)")
        else:
            e.add_argument("--classes", help="comma-separated class ids (default: unseen classes)")
            e.add_argument("--n", type=int, default=1)
            e.add_argument("--out", required=True, help="output CSV path")
        e.set_defaults(func=func)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except mt.TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError, KeyError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
