"""Command-line front end: ``bimpala {train,eval,probe,decompose,ablate,report}``.

Every subcommand writes only under ``--out`` and dumps its parsed flags to
``<out>/run_<command>.json``.  Outputs carry no timestamps or wall-clock data,
so identical flags give byte-identical files on one platform.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import decomposition as dc
from . import io
from . import maze as mz
from . import probes as pr
from . import training as tr
from .network import NetConfig, PolicyNetwork, network_forward

log = logging.getLogger("bimpala")


class UsageError(Exception):
    """Bad flag values detected after parsing; exits with status 2."""


# --- flag helpers ------------------------------------------------------------


def _k_list(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok == "full":
            out.append("full")
            continue
        try:
            k = int(tok)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad k value {tok!r}; use positive integers or 'full'") from None
        if k < 1:
            raise argparse.ArgumentTypeError(f"k must be positive, got {k}")
        out.append(k)
    if not out:
        raise argparse.ArgumentTypeError("empty k list")
    return out


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, default=0)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--threads", type=_positive, default=1, help="BLAS threads (1 keeps runs bit-reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--ckpt", type=Path, required=True)

    rollout = argparse.ArgumentParser(add_help=False)
    rollout.add_argument("--seeds", type=_positive, default=20, help="number of held-out evaluation mazes")
    rollout.add_argument("--seed-offset", type=_nonneg, default=0)
    rollout.add_argument("--step-cap", type=_positive, default=100)

    p = argparse.ArgumentParser(prog="bimpala", description="Bilinear maze policy: training, probing, decomposition.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a policy and write a checkpoint")
    t.add_argument("--mode", choices=("imitation", "pg"), default="imitation")
    t.add_argument("--steps", type=_nonneg, default=None, help="optimizer steps (default per TrainConfig)")
    t.add_argument("--batch-size", type=_positive, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--eval-every", type=_positive, default=None)
    t.add_argument("--compute-dtype", choices=("float32", "float64"), default=None)
    t.add_argument("--eval-seeds", type=_positive, default=20)
    t.add_argument("--step-cap", type=_positive, default=100)

    e = sub.add_parser("eval", parents=[common, ckpt, rollout], help="greedy evaluation on held-out mazes")
    e.add_argument("--cheese", default="random", help="'random' or 'row,col'")

    pb = sub.add_parser("probe", parents=[common, ckpt], help="train cheese-presence probes")
    pb.add_argument("--layer", default="post-residual", help="layer name, comma list, 'all' or 'post-residual'")
    pb.add_argument("--n-per-class", type=_positive, default=512)
    pb.add_argument("--l2", type=float, default=1e-4)
    pb.add_argument("--epochs", type=_positive, default=500)

    d = sub.add_parser("decompose", parents=[common, ckpt], help="eigenfilter spectra, importances and maps")
    which = d.add_mutually_exclusive_group(required=True)
    which.add_argument("--probe", type=Path, help="probe manifest (.json) written by 'probe'")
    which.add_argument("--action", choices=mz.ACTION_NAMES)
    which.add_argument("--channel", type=_nonneg)
    d.add_argument("--layer", default=None, help="residual block, e.g. seq0.res1")
    d.add_argument("--m-components", type=_positive, default=None)
    d.add_argument("--map-seed", type=_nonneg, default=0, help="maze used for the contribution maps")

    a = sub.add_parser("ablate", parents=[common, ckpt, rollout], help="top-k eigenfilter ablation sweep")
    a.add_argument("--target", choices=("conv", "fc", "all"), action="append", default=None)
    a.add_argument("--k-list", type=_k_list, default=_k_list("1,2,4,8,16,full"))

    r = sub.add_parser("report", parents=[common], help="summarise the CSV outputs of a run directory")
    r.add_argument("--run", type=Path, default=None, help="directory to summarise (default: --out)")
    return p


@contextlib.contextmanager
def _thread_limit(n: int):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _flags_dict(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        out[k] = str(v) if isinstance(v, Path) else v
    return out


# --- subcommands -------------------------------------------------------------


def cmd_train(args) -> None:
    cfg = tr.TrainConfig(
        mode="imitation" if args.mode == "imitation" else "policy_gradient",
        seed=args.seed,
        step_cap=args.step_cap,
        eval_seeds=tr.eval_seeds(args.eval_seeds),
    )
    if args.steps is not None:
        cfg.total_steps = args.steps
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.lr is not None:
        cfg.learning_rate = args.lr
    if args.eval_every is not None:
        cfg.eval_every = args.eval_every
    if args.compute_dtype is not None:
        cfg.compute_dtype = args.compute_dtype
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    net, metrics = tr.train(cfg)
    log.info("training took %.1fs", metrics.wall_seconds)
    cols = [c for c in tr.TrainMetrics.COLUMNS if c != "wall_seconds"]
    io.write_csv(args.out / "metrics.csv", cols, [[getattr(r, c) for c in cols] for r in metrics.records])
    final = tr.evaluate_policy(net, cfg.eval_seeds, cfg.step_cap)
    provenance = {"train_config": cfg.to_dict(), "final_eval_success_rate": final.success_rate}
    io.save_checkpoint(args.out / "model.ckpt", net, seed=args.seed, provenance=provenance)
    io.write_json(
        args.out / "train_summary.json",
        {"steps": cfg.total_steps, "final_eval_success_rate": final.success_rate, "final_mean_steps": final.mean_steps},
    )


def _parse_cell(text: str):
    if text == "random":
        return text
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--cheese must be 'random' or 'row,col', got {text!r}") from None
    return (r, c)


def cmd_eval(args) -> None:
    net = io.load_checkpoint(args.ckpt)
    seeds = tr.eval_seeds(args.seeds, args.seed_offset)
    try:
        res = tr.evaluate_policy(net, seeds, args.step_cap, _parse_cell(args.cheese))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    io.write_csv(args.out / "eval.csv", ["seed", "success", "steps"], res.per_seed)
    io.write_json(args.out / "eval_summary.json", {"success_rate": res.success_rate, "mean_steps": res.mean_steps})
    print(f"success_rate {res.success_rate:.3f} mean_steps {res.mean_steps:.2f}")


def _probe_layers(net: PolicyNetwork, spec: str) -> list[str]:
    if spec == "all":
        return list(net.config.layer_names)
    if spec == "post-residual":
        return list(net.config.block_names)
    names = [s.strip() for s in spec.split(",") if s.strip()]
    bad = [n for n in names if n not in net.config.layer_names]
    if bad or not names:
        raise UsageError(f"unknown layer {', '.join(bad) or spec!r}; valid names: {', '.join(net.config.layer_names)}")
    return names


def cmd_probe(args) -> None:
    net = io.load_checkpoint(args.ckpt)
    layers = _probe_layers(net, args.layer)
    rows = []
    for layer in layers:
        ds = pr.build_probe_dataset(net, layer, args.n_per_class, mz.DEFAULT_CHEESE, args.seed)
        probe, f1 = pr.train_probe(ds, args.l2, args.epochs)
        acc = pr.probe_accuracy(probe, ds)
        pr.save_probe(args.out / f"probe_{layer}", probe, {"checkpoint": args.ckpt.name, "f1": f1, "seed": args.seed})
        rows.append([layer, f1, acc])
        log.info("%s F1 %.4f acc %.4f", layer, f1, acc)
    io.write_csv(args.out / "probe_f1.csv", ["layer", "f1", "accuracy"], rows)


def _block_for_probe(net: PolicyNetwork, layer: str) -> str:
    block = layer[: -len(".gated_conv")] if layer.endswith(".gated_conv") else layer
    if block not in net.config.block_names:
        raise UsageError(
            f"probe was trained on {layer!r}, which is not a residual block output; "
            f"decomposable layers: {', '.join(net.config.block_names)}"
        )
    return block


def _map_maze(seed: int) -> mz.Maze:
    return mz.generate_maze(tr.EVAL_SEED_BASE + seed, mz.DEFAULT_CHEESE)


def _block_input(net: PolicyNetwork, block: str, obs: np.ndarray) -> np.ndarray:
    """Activation entering ``block`` (standard layout, unbatched)."""
    names = net.config.layer_names
    prev = names[names.index(f"{block}.gated_conv") - 1]
    _, _, cache = network_forward(net, obs)
    return cache[prev]


def _write_maps(out: Path, net: PolicyNetwork, block: str, picks: list[tuple[str, np.ndarray, float]], map_seed: int):
    """With-cheese, without-cheese and difference contribution maps for each pick."""
    m = _map_maze(map_seed)
    x_with = _block_input(net, block, mz.render_observation(m))
    x_without = _block_input(net, block, mz.render_observation(m, with_cheese=False))
    spec = net.bconv(block).spec
    k = spec.kernel_size
    for tag, f, weight in picks:
        filt = f.reshape(spec.in_channels, k, k)
        a = dc.contribution_map(filt, weight, x_with)
        b = dc.contribution_map(filt, weight, x_without)
        meta = {"block": block, "maze_seed": m.seed, "cheese": list(m.cheese), "weight": weight}
        io.write_pgm(out / f"map_{tag}_with.pgm", a, meta)
        io.write_pgm(out / f"map_{tag}_without.pgm", b, meta)
        io.write_pgm(out / f"map_{tag}_diff.pgm", a - b, meta)


def _spectrum_rows(bases: list[dc.EigenfilterBasis], label) -> list[list]:
    return [[label(j), i, lam] for j, b in enumerate(bases) for i, lam in enumerate(b.eigenvalues)]


def cmd_decompose(args) -> None:
    net = io.load_checkpoint(args.ckpt)
    out = args.out
    if args.probe is not None:
        probe = pr.load_probe(args.probe)
        block = _block_for_probe(net, probe.layer_name)
        if args.layer is not None and args.layer != block:
            raise UsageError(f"--layer {args.layer} does not match the probe's layer {probe.layer_name}")
        bsym = dc.build_bsym(net.bconv(block))
        if probe.activation_shape[0] != bsym.out_channels:
            raise UsageError(f"probe has {probe.activation_shape[0]} channels; {block} writes {bsym.out_channels}")
        psvd = dc.probe_svd(probe.weights, probe.activation_shape)
        try:
            table = dc.joint_importance(psvd, bsym, args.m_components)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        io.write_csv(
            out / "singular_values.csv",
            ["index", "singular_value", "cumulative_variance_fraction"],
            [[i, s, f] for i, (s, f) in enumerate(zip(psvd.singular_values, psvd.variance_fraction))],
        )
        io.write_csv(
            out / "spectrum.csv", ["singular_index", "eigen_index", "eigenvalue"], _spectrum_rows(table.bases, lambda j: j)
        )
        io.write_csv(
            out / "importance.csv",
            ["rank", "singular_index", "eigen_index", "singular_value", "eigenvalue", "score"],
            [
                [r.rank, r.singular_index, r.eigen_index, table.singular_values[r.singular_index],
                 table.bases[r.singular_index].eigenvalues[r.eigen_index], r.score]
                for r in table.rows
            ],
        )
        pos = next(r for r in table.rows if r.score > 0) if any(r.score > 0 for r in table.rows) else table.rows[0]
        neg = next(r for r in table.rows if r.score < 0) if any(r.score < 0 for r in table.rows) else table.rows[-1]
        picks = [
            (tag, table.bases[r.singular_index].filters[r.eigen_index], r.score)
            for tag, r in (("top_positive", pos), ("top_negative", neg))
        ]
        _write_maps(out, net, block, picks, args.map_seed)
        summary = {"mode": "probe", "block": block, "probe_layer": probe.layer_name, "m_components": len(table.bases)}
    elif args.channel is not None:
        block = args.layer or net.config.block_names[0]
        if block not in net.config.block_names:
            raise UsageError(f"unknown block {block!r}; valid: {', '.join(net.config.block_names)}")
        bsym = dc.build_bsym(net.bconv(block))
        if args.channel >= bsym.out_channels:
            raise UsageError(f"--channel must be < {bsym.out_channels}")
        basis = dc.eigenfilters(dc.standard_basis_form(bsym, args.channel))
        io.write_csv(out / "spectrum.csv", ["channel", "eigen_index", "eigenvalue"], _spectrum_rows([basis], lambda j: args.channel))
        order = np.argsort(-basis.eigenvalues, kind="stable")
        picks = [("top_positive", basis.filters[order[0]], basis.eigenvalues[order[0]]),
                 ("top_negative", basis.filters[order[-1]], basis.eigenvalues[order[-1]])]
        _write_maps(out, net, block, picks, args.map_seed)
        summary = {"mode": "channel", "block": block, "channel": args.channel}
    else:
        if args.layer not in (None, "gated_fc"):
            raise UsageError("--action decomposes gated_fc; --layer must be omitted or 'gated_fc'")
        bases = dc.action_bases(net.fc, net.logits_head)
        io.write_csv(
            out / "spectrum.csv",
            ["eigen_index", "action", "eigenvalue"],
            [[i, mz.ACTION_NAMES[a], bases[a].eigenvalues[i]] for i in range(len(bases[0].eigenvalues)) for a in range(len(bases))],
        )
        a = mz.ACTION_NAMES.index(args.action)
        basis = bases[a]
        order = np.argsort(-basis.eigenvalues, kind="stable")
        cfg = net.config
        shape = (cfg.seq_channels[-1], cfg.final_size * cfg.final_size)
        for tag, idx in (("top_positive", order[0]), ("top_negative", order[-1])):
            io.write_pgm(out / f"eigvec_{args.action}_{tag}.pgm", basis.filters[idx].reshape(shape),
                         {"action": args.action, "eigenvalue": float(basis.eigenvalues[idx]), "layout": "[C, H*W]"})
        summary = {"mode": "action", "action": args.action}
    io.write_json(out / "decompose_summary.json", summary)


def _resolve_k(k, size: int) -> int:
    return size if k == "full" else min(int(k), size)


def cmd_ablate(args) -> None:
    net = io.load_checkpoint(args.ckpt)
    targets = args.target or ["conv", "fc"]
    blocks = net.config.block_names
    conv_sizes = {b: net.bconv(b).spec.patch_dim for b in blocks}
    fc_size = net.config.flat_dim
    max_k = {"conv": max(conv_sizes.values()), "fc": fc_size, "all": min(max(conv_sizes.values()), fc_size)}
    for t in targets:
        for k in args.k_list:
            if k != "full" and k > max_k[t]:
                raise UsageError(f"k={k} exceeds the largest basis size {max_k[t]} for target {t}")
    seeds = tr.eval_seeds(args.seeds, args.seed_offset)
    base = tr.evaluate_policy(net, seeds, args.step_cap)
    conv_cache: dict = {}
    fc_bases = dc.action_bases(net.fc, net.logits_head)
    rows = []
    for t in targets:
        for k in args.k_list:
            overrides = {}
            if t in ("conv", "all"):
                per_block = {b: _resolve_k(k, conv_sizes[b]) for b in blocks}
                conv = {}
                for b in blocks:
                    conv.update(dc.conv_overrides(net, [b], per_block[b], conv_cache))
                overrides["conv_override"] = conv
            if t in ("fc", "all"):
                overrides["fc_override"] = dc.ablate_fc_topk(net.fc, net.logits_head, _resolve_k(k, fc_size), fc_bases)
            res = tr.evaluate_policy(tr.network_source(net, **overrides), seeds, args.step_cap)
            same = [p == q for p, q in zip(res.per_seed, base.per_seed)]
            rows.append([t, k, res.success_rate, res.mean_steps, res.mean_steps_solved, float(np.mean(same))])
            log.info("%s k=%s success %.2f", t, k, res.success_rate)
    io.write_csv(
        args.out / "ablation.csv",
        ["target", "k", "success_rate", "mean_steps", "mean_steps_solved", "fraction_same_as_baseline"],
        rows,
    )
    io.write_json(
        args.out / "ablation_baseline.json",
        {"success_rate": base.success_rate, "mean_steps": base.mean_steps, "seeds": seeds, "step_cap": args.step_cap},
    )


def cmd_report(args) -> None:
    run = args.run or args.out
    lines = [f"# Run report: {run.resolve().name}", ""]
    for csv_path in sorted(run.rglob("*.csv")):
        header, rows = io.read_csv(csv_path)
        lines.append(f"## {csv_path.relative_to(run)} ({len(rows)} rows)")
        lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        shown = rows[:12]
        for row in shown:
            lines.append("| " + " | ".join(_short(v) for v in row) + " |")
        if len(rows) > len(shown):
            lines.append(f"| ... {len(rows) - len(shown)} more rows |")
        lines.append("")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.md").write_text("\n".join(lines) + "\n")


def _short(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    if math.isfinite(f) and f != int(f):
        return f"{f:.6g}"
    return v


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "decompose": cmd_decompose,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    args.out.mkdir(parents=True, exist_ok=True)
    io.write_json(args.out / f"run_{args.command}.json", _flags_dict(args))
    try:
        with _thread_limit(args.threads):
            COMMANDS[args.command](args)
    except UsageError as exc:
        parser.exit(2, f"bimpala {args.command}: error: {exc}\n")
    except FileNotFoundError as exc:
        parser.exit(2, f"bimpala {args.command}: error: {exc}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
