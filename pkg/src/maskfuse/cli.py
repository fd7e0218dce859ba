"""Command-line entry point: train, sample, inpaint, eval, retrieve, edit,
scale-sweep. Flags mirror config keys (--key value); every run writes its
fully resolved config and seed beside its outputs."""

import argparse
import os
import sys

import numpy as np

from maskfuse.config import RunConfig
from maskfuse.data import (
    ToyDataset,
    generate_toy_dataset,
    read_shard,
    write_token_shard,
)
from maskfuse.denoiser import OracleDenoiser
from maskfuse.metrics import (
    make_retrieval_task,
    retrieval_accuracy,
    retrieval_vs_steps_sweep,
    token_entropy,
    generative_perplexity,
    write_grid_csv,
    write_metrics_jsonl,
)
from maskfuse.objective import elbo_estimate
from maskfuse.sampler import (
    MaskedSequence,
    edit_best_of_n,
    generate_batch,
    write_trace_csv,
)
from maskfuse.scalelab import (
    ModelSpec,
    compute_offset_factor,
    fit_scaling_pipeline,
    isoflop_sweep,
    planted_loss_surface,
    planted_optimal_exponent,
    read_points_csv,
    sweep_planted_surface,
    write_points_csv,
)
from maskfuse.train import make_sweep_train_fn, train_model
from maskfuse.transformer import load_checkpoint
from maskfuse.util import substream
from maskfuse.vocab import ConfigError, validate_tokens


def _split_overrides(extras):
    if len(extras) % 2 != 0:
        raise ConfigError(f"dangling override near {extras[-1]!r}; use --key value pairs")
    pairs = []
    for flag, value in zip(extras[0::2], extras[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"expected --key, got {flag!r}")
        pairs.append((flag[2:], value))
    return pairs


def _load_config(args, extras) -> RunConfig:
    cfg = RunConfig.load(args.config, _split_overrides(extras))
    if args.out:
        cfg.values["run.output_dir"] = args.out
    return cfg


def _dataset(cfg: RunConfig) -> ToyDataset:
    enumerable = cfg["data.enumerable"]
    n = cfg["data.n_samples"] or None
    return generate_toy_dataset(cfg.toy_config(), n_samples=n, enumerable=enumerable)


def _model(cfg: RunConfig, args):
    if getattr(args, "oracle", False):
        dataset = _dataset(cfg)
        if dataset.dist is None:
            raise ConfigError("--oracle needs an enumerable dataset")
        return OracleDenoiser(dataset.dist)
    if not getattr(args, "ckpt", None):
        raise ConfigError("this command needs --ckpt (or --oracle)")
    return load_checkpoint(args.ckpt)


def _read_mask_spec(path, layout, vocab):
    """Per-position lines: FREE, or CLAMP <token id>."""
    tokens = np.full(layout.length, vocab.mask_id, dtype=np.int64)
    entries = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                entries.append(line)
    if len(entries) != layout.length:
        raise ConfigError(f"mask-spec has {len(entries)} entries for length {layout.length}")
    for i, entry in enumerate(entries):
        parts = entry.split()
        if parts[0].upper() == "FREE":
            continue
        if parts[0].upper() == "CLAMP" and len(parts) == 2:
            tokens[i] = int(parts[1])
        else:
            raise ConfigError(f"mask-spec line {i + 1}: expected FREE or CLAMP <id>, got {entry!r}")
    report = validate_tokens(tokens, layout, vocab)
    if not report:
        raise ConfigError(f"mask-spec clamps an invalid token at position {report.position}")
    return tokens


def cmd_train(args, extras) -> int:
    cfg = _load_config(args, extras)
    out = cfg["run.output_dir"]
    resolved = cfg.write_resolved(out)
    dataset = _dataset(cfg)
    result = train_model(cfg, dataset, out_dir=out)
    records = [("train.final_loss_smoothed", result.final_smoothed)]
    write_metrics_jsonl(records, os.path.join(out, "metrics.jsonl"), resolved, cfg["seed"])
    print(f"trained {cfg['model.attention']} model for {len(result.curve)} steps; "
          f"final smoothed loss {result.final_smoothed:.4f}; outputs in {out}")
    return 0


def _run_sampling(cfg: RunConfig, model, initial_tokens, out, resolved, n: int) -> None:
    layout = cfg.layout()
    vocab = cfg.vocab()
    sampler_cfg = cfg.sampler_config()
    batch = np.repeat(initial_tokens[None, :], n, axis=0)
    rng = substream(cfg["seed"], "sampling")
    tokens, trace = generate_batch(
        model, batch, layout, sampler_cfg, rng,
        cache_period=sampler_cfg.cache_period, collect_trace=True,
    )
    write_token_shard(tokens, layout, vocab, os.path.join(out, "generations.shard"))
    write_trace_csv(trace, os.path.join(out, "trace.csv"))
    report = token_entropy(tokens, layout)
    write_metrics_jsonl(
        [("sample.entropy.overall", report.overall), ("sample.count", n)],
        os.path.join(out, "metrics.jsonl"), resolved, cfg["seed"],
    )


def cmd_sample(args, extras) -> int:
    cfg = _load_config(args, extras)
    out = cfg["run.output_dir"]
    resolved = cfg.write_resolved(out)
    model = _model(cfg, args)
    layout, vocab = cfg.layout(), cfg.vocab()
    all_mask = np.full(layout.length, vocab.mask_id, dtype=np.int64)
    _run_sampling(cfg, model, all_mask, out, resolved, args.n)
    print(f"wrote {args.n} generations to {out}")
    return 0


def cmd_inpaint(args, extras) -> int:
    cfg = _load_config(args, extras)
    out = cfg["run.output_dir"]
    resolved = cfg.write_resolved(out)
    model = _model(cfg, args)
    layout, vocab = cfg.layout(), cfg.vocab()
    initial = _read_mask_spec(args.mask_spec, layout, vocab)
    _run_sampling(cfg, model, initial, out, resolved, args.n)
    print(f"wrote {args.n} inpainted sequences to {out}")
    return 0


def cmd_eval(args, extras) -> int:
    cfg = _load_config(args, extras)
    out = cfg["run.output_dir"]
    resolved = cfg.write_resolved(out)
    dataset = _dataset(cfg)
    model = _model(cfg, args)
    kind = cfg.schedule_kind()
    seed = cfg["seed"]

    n_eval = min(cfg["eval.n_samples"], dataset.size)
    gaps = []
    estimates = []
    for i in range(n_eval):
        seq = MaskedSequence(dataset.sequences[i], dataset.layout)
        est = elbo_estimate(model, seq, cfg["eval.n_mc"], kind, substream(seed, "eval-elbo", i))
        estimates.append(est.nats_per_token)
        if dataset.dist is not None:
            exact = dataset.dist.exact_nll(dataset.sequences[i]) / dataset.layout.length
            gaps.append(est.nats_per_token - exact)
    mean_elbo = float(np.mean(estimates))
    records = [("eval.elbo_nats_per_token", mean_elbo)]
    if gaps:
        records.append(("eval.elbo_gap_nats_per_token", float(np.mean(gaps))))
    if dataset.dist is not None:
        sample_rng = substream(seed, "eval-entropy")
        samples = dataset.dist.sample(sample_rng, cfg["eval.n_samples"])
        ent = token_entropy(samples, dataset.layout)
        records += [
            ("eval.data_entropy.overall", ent.overall),
            ("eval.data_generative_perplexity", generative_perplexity(samples, dataset.dist)),
        ]
    write_metrics_jsonl(records, os.path.join(out, "metrics.jsonl"), resolved, seed)
    for name, value in records:
        print(f"{name} = {value:.6g}")
    if args.assert_thresholds and gaps:
        gap = float(np.mean(gaps))
        if gap > cfg["eval.assert_max_elbo_gap"]:
            print(f"ASSERT FAIL: ELBO gap {gap:.4f} > {cfg['eval.assert_max_elbo_gap']}")
            return 1
    return 0


def cmd_retrieve(args, extras) -> int:
    cfg = _load_config(args, extras)
    out = cfg["run.output_dir"]
    resolved = cfg.write_resolved(out)
    dataset = _dataset(cfg)
    if dataset.dist is None:
        raise ConfigError("retrieval needs an enumerable dataset")
    model = _model(cfg, args)
    seed = cfg["seed"]
    kind = cfg.schedule_kind()
    task_rng = substream(seed, "retrieval-tasks")
    tasks = [
        make_retrieval_task(dataset.dist, cfg["retrieve.mode"], task_rng, cfg["retrieve.n_candidates"])
        for _ in range(cfg["retrieve.n_tasks"])
    ]
    n_mc_values = [int(x) for x in cfg["retrieve.n_mc_values"].split(",") if x]
    cfg_weights = [float(x) for x in cfg["retrieve.cfg_weights"].split(",") if x]
    grid = retrieval_vs_steps_sweep(model, tasks, n_mc_values, cfg_weights, seed, kind)
    write_grid_csv(grid, os.path.join(out, "retrieval_grid.csv"))
    accuracy = retrieval_accuracy(model, tasks, cfg["eval.n_mc"], seed, kind)
    write_metrics_jsonl(
        [("retrieve.accuracy", accuracy), ("retrieve.mode", cfg["retrieve.mode"])],
        os.path.join(out, "metrics.jsonl"), resolved, seed,
    )
    print(f"retrieval accuracy ({cfg['retrieve.mode']}, {cfg['retrieve.n_tasks']} tasks): {accuracy:.3f}")
    if args.assert_thresholds and accuracy < cfg["retrieve.assert_min_accuracy"]:
        print(f"ASSERT FAIL: accuracy {accuracy:.3f} < {cfg['retrieve.assert_min_accuracy']}")
        return 1
    return 0


def cmd_edit(args, extras) -> int:
    cfg = _load_config(args, extras)
    out = cfg["run.output_dir"]
    resolved = cfg.write_resolved(out)
    dataset = _dataset(cfg)
    model = _model(cfg, args)
    layout, vocab = dataset.layout, dataset.vocab
    if args.input:
        pairs = read_shard(args.input, vocab).sequences
    else:
        rng = substream(cfg["seed"], "edit-input")
        pairs = dataset.sequences[rng.integers(0, dataset.size, size=args.n_pairs)]
    sampler_cfg = cfg.sampler_config()
    rng = substream(cfg["seed"], "edit")
    edited = []
    for row in pairs:
        result = edit_best_of_n(
            model,
            MaskedSequence(row, layout),
            cfg["edit.n"],
            cfg["edit.noise_level"],
            sampler_cfg,
            rng,
            clamp_text=cfg["edit.clamp_text"],
            n_mc=cfg["eval.n_mc"],
        )
        edited.append(result.tokens)
    write_token_shard(np.stack(edited), layout, vocab, os.path.join(out, "edited.shard"))
    write_metrics_jsonl(
        [("edit.count", len(edited)), ("edit.best_of", cfg["edit.n"])],
        os.path.join(out, "metrics.jsonl"), resolved, cfg["seed"],
    )
    print(f"edited {len(edited)} pairs into {out}/edited.shard")
    return 0


DEFAULT_PLANTED = dict(a=1.2, b_coef=40.0, alpha=0.6, e_coef=60.0, beta=0.4)


def _scale_grid(cfg: RunConfig) -> list[ModelSpec]:
    base = cfg.model_spec()
    text = cfg["scale.grid"]
    if text:
        triples = [tuple(int(x) for x in item.split(":")) for item in text.split(";") if item]
    else:
        triples = [(2, 2, 32), (2, 4, 48), (3, 4, 64), (4, 4, 96), (4, 8, 128), (6, 8, 160)]
    from dataclasses import replace

    return [replace(base, n_layers=l, n_heads=h, d_model=d) for l, h, d in triples]


def cmd_scale_sweep(args, extras) -> int:
    cfg = _load_config(args, extras)
    out = cfg["run.output_dir"]
    resolved = cfg.write_resolved(out)
    seed = cfg["seed"]
    grid = _scale_grid(cfg)
    budgets_text = cfg["scale.budgets"]
    if budgets_text:
        budgets = [int(float(x)) for x in budgets_text.split(",") if x]
    elif cfg["scale.planted"]:
        # the planted surface's optima sweep the default grid over these budgets
        budgets = [int(1e13), int(3e13), int(1e14), int(3e14), int(1e15)]
    else:
        budgets = [int(3e9), int(1e10), int(3e10), int(1e11)]

    if cfg["scale.planted"]:
        surface = planted_loss_surface(**DEFAULT_PLANTED)
        points = sweep_planted_surface(budgets, grid, surface)
    else:
        dataset = _dataset(cfg)
        points = isoflop_sweep(budgets, grid, make_sweep_train_fn(cfg, dataset))
    write_points_csv(points, os.path.join(out, "scaling_points.csv"), seed)
    try:
        summary = fit_scaling_pipeline(points)
    except ValueError as exc:
        print(f"wrote {len(points)} points; fit skipped ({exc})")
        write_metrics_jsonl(
            [("scale.points", len(points))], os.path.join(out, "metrics.jsonl"), resolved, seed
        )
        return 0
    law = summary.power_law
    records = [
        ("scale.power_law.exponent", law.exponent),
        ("scale.power_law.coefficient", law.coefficient),
        ("scale.power_law.residual", law.residual),
    ]
    if cfg["scale.planted"]:
        truth = planted_optimal_exponent(DEFAULT_PLANTED["alpha"], DEFAULT_PLANTED["beta"])
        rel_err = abs(law.exponent - truth) / truth
        records.append(("scale.planted_exponent_rel_err", rel_err))
    write_metrics_jsonl(records, os.path.join(out, "metrics.jsonl"), resolved, seed)
    print(f"power law: N_opt = {law.coefficient:.4g} * C^{law.exponent:.4f} "
          f"(residual {law.residual:.3g}; {len(points)} points)")
    if cfg["scale.planted"] and args.assert_thresholds:
        if rel_err > cfg["scale.assert_max_exponent_err"]:
            print(f"ASSERT FAIL: exponent error {rel_err:.4f} > {cfg['scale.assert_max_exponent_err']}")
            return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskfuse",
        description="Unified multimodal masked discrete diffusion at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_model=False):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--out", default=None, help="output directory (overrides run.output_dir)")
        p.add_argument("--assert", dest="assert_thresholds", action="store_true",
                       help="nonzero exit when an acceptance threshold is violated")
        if needs_model:
            p.add_argument("--ckpt", default=None, help="model checkpoint")
            p.add_argument("--oracle", action="store_true",
                           help="use the exact enumeration oracle instead of a checkpoint")

    p = sub.add_parser("train", help="train a diffusion or AR model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="unconditional generation into a shard")
    common(p, needs_model=True)
    p.add_argument("--n", type=int, default=16, help="number of generations")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("inpaint", help="generation with a CLAMP/FREE mask-spec file")
    common(p, needs_model=True)
    p.add_argument("--mask-spec", required=True, help="per-position FREE or CLAMP <id> lines")
    p.add_argument("--n", type=int, default=16)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="likelihood bounds, entropy, perplexity")
    common(p, needs_model=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="image/text/joint retrieval accuracy")
    common(p, needs_model=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("edit", help="best-of-n noise-and-denoise editing")
    common(p, needs_model=True)
    p.add_argument("--input", default=None, help="shard of pairs to edit (default: dataset draws)")
    p.add_argument("--n-pairs", type=int, default=4)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("scale-sweep", help="IsoFLOP sweep and power-law fit")
    common(p)
    p.set_defaults(func=cmd_scale_sweep)

    return parser


def main(argv=None) -> int:
    from maskfuse.util import configure_torch_threads

    configure_torch_threads()
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.func(args, extras)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
