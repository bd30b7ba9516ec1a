"""Command-line driver: generate -> project -> degrade -> reconstruct -> split
-> evaluate, plus ``pipeline`` to run them all.

Outputs live under one root::

    <root>/phantoms/<item>/slice_NNN.{meta,raw,lab}, defects.csv
    <root>/sinograms/{a,b,c}/<item>/slice_NNN.{meta,raw}
    <root>/recons/{full,s1,s2}/<dataset>-<method>/<item>/slice_NNN.{meta,raw}
    <root>/splits/{empirical,miqp}_split_results*.{csv,txt}
    <root>/reports/*.csv

Every stage writes a manifest (JSON) with its flags and seed. Exit codes:
0 success, 2 usage error, 3 data or schema error, 4 solver limit reached.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ctbench import __version__
from ctbench.degrade import (
    DEFAULT_ALPHA,
    DEFAULT_NOISE_FRACTION,
    add_gaussian_noise,
    apply_scatter,
    default_kernel_table,
    read_kernel_table,
    scatter_slice_indices,
)
from ctbench.errors import CtbenchError, DataError
from ctbench.gridio import (
    read_defect_table,
    read_grid,
    read_labeled_slice,
    write_defect_table,
    write_grid,
    write_labeled_slice,
)
from ctbench.metrics import psnr, ssim
from ctbench.phantom import (
    PhantomSpec,
    build_defect_table,
    format_phantom_spec,
    generate_collection,
    read_phantom_spec,
)
from ctbench.projector import (
    parallel_geometry,
    project_without_inverse_crime,
    radon_forward,
    read_sinogram,
    write_sinogram,
)
from ctbench.recon import ReconSettings, make_sampling, reconstruct
from ctbench.split import (
    DEFAULT_GAP,
    DEFAULT_NODE_LIMIT,
    DEFAULT_PRIMARY,
    DEFAULT_TOLERANCE,
    NoSuccessfulSplit,
    empirical_split,
    miqp_split,
    normalize_table,
    write_split_outputs,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_LIMIT = 0, 2, 3, 4
SAMPLINGS = ("full", "s1", "s2")
DATASETS = ("a", "b", "c")


# --------------------------------------------------------------------------
# helpers


def _manifest(out_dir: Path, command: str, args: argparse.Namespace,
              name: str = "manifest.json", **extra) -> None:
    flags = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "handler")
    }
    doc = {"command": command, "version": __version__, "flags": flags, **extra}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n"
    )


def _stage_dir(path: Path, stage: str, hint: str) -> Path:
    if not path.is_dir():
        raise DataError(f"missing upstream stage '{stage}' ({path}); run `{hint}` first")
    return path


def _slices(stage: Path) -> list[tuple[str, str]]:
    """(item, slice stem) pairs under a stage directory, sorted."""
    out = []
    for item in sorted(p for p in stage.iterdir() if p.is_dir()):
        for meta in sorted(item.glob("slice_*.meta")):
            out.append((item.name, meta.stem))
    if not out:
        raise DataError(f"no slices found under {stage}")
    return out


def _slice_seed(seed: int, item_pos: int, slice_pos: int) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, item_pos, slice_pos])
    return int(ss.generate_state(1, np.uint64)[0])


def _run(jobs: int, fn, tasks: list) -> list:
    if jobs <= 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


# --------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    spec = read_phantom_spec(args.spec) if args.spec else PhantomSpec()
    if args.size is not None:
        spec = replace(spec, size=args.size)
    out = Path(args.out) / "phantoms"
    collection = generate_collection(spec, args.items, args.slices, args.seed)
    for item_id, stack in collection:
        d = out / item_id
        d.mkdir(parents=True, exist_ok=True)
        for k, sl in enumerate(stack):
            write_labeled_slice(sl, d / f"slice_{k:03d}")
    write_defect_table(build_defect_table(collection), out / "defects.csv")
    (out / "spec.txt").write_text(format_phantom_spec(spec), encoding="utf-8", newline="\n")
    _manifest(out, "generate", args, n_files=len(collection) * args.slices)
    return EXIT_OK


# --------------------------------------------------------------------------
# project


def _project_task(t):
    src, dst, n_angles, upsample = t
    image = read_labeled_slice(src).image
    geo = parallel_geometry(image.width, n_angles, image.pixel_size)
    if upsample > 1:
        sino = project_without_inverse_crime(image, geo, upsample)
    else:
        sino = radon_forward(image, geo)
    write_sinogram(sino, dst)


def cmd_project(args) -> int:
    root = Path(args.out)
    src = _stage_dir(root / "phantoms", "generate", "ctbench generate")
    out = root / "sinograms" / "a"
    tasks = []
    for item, stem in _slices(src):
        (out / item).mkdir(parents=True, exist_ok=True)
        tasks.append((src / item / stem, out / item / stem, args.angles, args.upsample))
    _run(args.jobs, _project_task, tasks)
    _manifest(out, "project", args)
    return EXIT_OK


# --------------------------------------------------------------------------
# degrade


def _noise_task(t):
    src, dst, fraction, seed = t
    write_sinogram(add_gaussian_noise(read_sinogram(src), fraction, seed), dst)


def _scatter_task(t):
    src, dst, table_path, alpha = t
    table = read_kernel_table(table_path) if table_path else default_kernel_table()
    write_sinogram(apply_scatter(read_sinogram(src), table, alpha), dst)


def cmd_degrade(args) -> int:
    root = Path(args.out)
    src = _stage_dir(root / "sinograms" / "a", "project", "ctbench project")
    pairs = _slices(src)
    items = sorted({i for i, _ in pairs})
    if args.kernel_table:
        read_kernel_table(args.kernel_table)  # fail early on a bad table
    if args.dataset in ("b", "all"):
        out = root / "sinograms" / "b"
        tasks = []
        for item, stem in pairs:
            (out / item).mkdir(parents=True, exist_ok=True)
            k = int(stem.split("_")[1])
            seed = _slice_seed(args.seed, items.index(item), k)
            tasks.append((src / item / stem, out / item / stem, args.noise_fraction, seed))
        _run(args.jobs, _noise_task, tasks)
        _manifest(out, "degrade", args, dataset="b")
    if args.dataset in ("c", "all"):
        out = root / "sinograms" / "c"
        tasks = []
        for item in items:
            stems = [s for i, s in pairs if i == item]
            (out / item).mkdir(parents=True, exist_ok=True)
            for k in scatter_slice_indices(len(stems)):
                stem = stems[k]
                tasks.append((src / item / stem, out / item / stem,
                              str(args.kernel_table) if args.kernel_table else None, args.alpha))
        _run(args.jobs, _scatter_task, tasks)
        _manifest(out, "degrade", args, dataset="c")
    return EXIT_OK


# --------------------------------------------------------------------------
# reconstruct


def _recon_task(t):
    src, dst, method, sampling, settings = t
    sino = read_sinogram(src)
    write_grid(reconstruct(sino, method, make_sampling(sampling, sino.angles), settings), dst)


def cmd_reconstruct(args) -> int:
    root = Path(args.out)
    src = _stage_dir(root / "sinograms" / args.dataset, f"sinograms/{args.dataset}",
                     "ctbench project" if args.dataset == "a" else "ctbench degrade")
    out = root / "recons" / args.sampling / f"{args.dataset}-{args.method}"
    settings = ReconSettings(iterations=args.iterations, output_size=args.size)
    tasks = []
    for item, stem in _slices(src):
        (out / item).mkdir(parents=True, exist_ok=True)
        tasks.append((src / item / stem, out / item / stem, args.method, args.sampling, settings))
    _run(args.jobs, _recon_task, tasks)
    _manifest(out, "reconstruct", args)
    return EXIT_OK


# --------------------------------------------------------------------------
# split


def _parse_targets(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise DataError(f"bad targets {text!r}") from None


def cmd_split(args) -> int:
    root = Path(args.out)
    table_path = Path(args.table) if args.table else root / "phantoms" / "defects.csv"
    if not table_path.is_file():
        raise DataError(f"defect table {table_path} not found; run `ctbench generate` or pass --table")
    table = read_defect_table(table_path, args.columns.split(",") if args.columns else None)
    matrix = normalize_table(table)
    out = root / "splits"
    n = args.n if args.n is not None else max(1, round(0.2 * table.n_items))
    if args.method == "empirical":
        try:
            result = empirical_split(matrix, args.target, n, args.samples, args.tolerance,
                                     args.primary, args.seed)
        except NoSuccessfulSplit as exc:
            out.mkdir(parents=True, exist_ok=True)
            st = exc.stats
            (out / "empirical_split_results.txt").write_text(
                "method: empirical\n"
                f"samples: {st['samples']}\nsuccessful sequences: 0\n"
                f"primary defect: {st['primary_defect']}\ntolerance: {st['tolerance']!r}\n"
                "result: no successful sequence\n",
                encoding="utf-8", newline="\n",
            )
            _manifest(out, "split-empirical", args, "empirical_manifest.json", n_subset=n)
            raise
        write_split_outputs(result, table, out, "empirical", include_timing=args.timing)
        _manifest(out, "split-empirical", args, "empirical_manifest.json", n_subset=n)
        return EXIT_OK
    targets = _parse_targets(args.targets)
    if len(targets) == 1:
        targets = targets * matrix.n_defects
    result = miqp_split(matrix, targets, n, args.gap, args.node_limit, args.time_limit)
    write_split_outputs(result, table, out, "miqp", include_timing=args.timing)
    _manifest(out, "split-miqp", args, "miqp_manifest.json", n_subset=n)
    if result.stats["status"] != "optimal":
        print(f"solver limit reached; certified gap {result.stats['gap']:.3g}", file=sys.stderr)
        return EXIT_LIMIT
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate


def _truth_image(path: Path):
    meta = path.with_suffix(".meta")
    if path.with_suffix(".lab").exists():
        return read_labeled_slice(meta).image
    return read_grid(meta)


def _eval_task(t):
    rec, truth = t
    x = read_grid(rec.with_suffix(".meta")).values
    ref = _truth_image(truth).values
    if x.shape != ref.shape:
        raise DataError(f"{rec}: shape {x.shape} differs from truth {ref.shape}")
    return psnr(x, ref), ssim(x, ref)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


def cmd_evaluate(args) -> int:
    root = Path(args.out)
    rec_dir = _stage_dir(Path(args.recon), "reconstruct", "ctbench reconstruct")
    truth_dir = Path(args.truth) if args.truth else root / "phantoms"
    truth_dir = _stage_dir(truth_dir, "generate", "ctbench generate")
    pairs = _slices(rec_dir)
    tasks = []
    for item, stem in pairs:
        truth = truth_dir / item / stem
        if not truth.with_suffix(".meta").exists():
            raise DataError(f"no ground truth for {item}/{stem} in {truth_dir}")
        tasks.append((rec_dir / item / stem, truth))
    scores = np.array(_run(args.jobs, _eval_task, tasks), dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item_id", "slice", "psnr", "ssim"])
    for (item, stem), (p, s) in zip(pairs, scores):
        w.writerow([item, stem, _fmt(p), _fmt(s)])
    finite = scores[np.isfinite(scores[:, 0])]
    mean_p = float(finite[:, 0].mean()) if len(finite) else math.inf
    std_p = float(finite[:, 0].std()) if len(finite) else 0.0
    w.writerow(["mean", "", _fmt(mean_p), _fmt(float(scores[:, 1].mean()))])
    w.writerow(["std", "", _fmt(std_p), _fmt(float(scores[:, 1].std()))])
    report = Path(args.report) if args.report else (
        root / "reports" / f"{rec_dir.parent.name}_{rec_dir.name}.csv"
    )
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    _manifest(report.parent, "evaluate", args, f"{report.stem}_manifest.json")
    print(f"{report}: PSNR {mean_p:.2f} +- {std_p:.2f} dB, "
          f"SSIM {scores[:, 1].mean():.4f} +- {scores[:, 1].std():.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# pipeline


def cmd_pipeline(args) -> int:
    root = Path(args.out)
    common = dict(seed=args.seed, jobs=args.jobs, out=args.out)

    def ns(**kw):
        return argparse.Namespace(**common, **kw)

    cmd_generate(ns(spec=args.spec, items=args.items, slices=args.slices, size=args.size))
    cmd_project(ns(angles=args.angles, upsample=args.upsample))
    cmd_degrade(ns(dataset="all", noise_fraction=args.noise_fraction, alpha=args.alpha,
                   kernel_table=args.kernel_table))
    runs = [("a", "fbp", s) for s in SAMPLINGS] + [("a", "cgls", "full"),
                                                  ("b", "fbp", "full"), ("c", "fbp", "full")]
    for dataset, method, sampling in runs:
        cmd_reconstruct(ns(dataset=dataset, method=method, sampling=sampling,
                           iterations=args.iterations, size=None))
    for dataset, method, sampling in runs:
        cmd_evaluate(ns(recon=str(root / "recons" / sampling / f"{dataset}-{method}"),
                        truth=None, report=None))
    split_common = dict(table=None, columns=None, n=args.split_n, timing=False)
    status = EXIT_OK
    try:
        cmd_split(ns(method="empirical", target=args.target, samples=args.samples,
                     tolerance=args.tolerance, primary=DEFAULT_PRIMARY, **split_common))
    except NoSuccessfulSplit as exc:
        print(f"empirical split: {exc}", file=sys.stderr)
    status = max(status, cmd_split(ns(method="miqp", targets=str(args.target), gap=args.gap,
                                      node_limit=DEFAULT_NODE_LIMIT, time_limit=None,
                                      **split_common)))
    _manifest(root, "pipeline", args)
    return status


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        g = argparse.ArgumentParser(add_help=False, argument_default=default)
        g.add_argument("--seed", type=int, help="master seed (default 0)")
        g.add_argument("--jobs", type=int, help="worker processes (default 1)")
        g.add_argument("--out", help="output root directory (default ctbench-out)")
        return g

    # global flags may appear before or after the subcommand; the copies on
    # the subparsers must not overwrite values given up front
    glob = global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="ctbench", description=__doc__.split("\n\n")[0],
                                parents=[global_flags(None)])
    p.set_defaults(seed=0, jobs=1, out="ctbench-out")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, parents=[glob])
        sp.set_defaults(func=func)
        return sp

    def gen_flags(sp):
        sp.add_argument("--spec", default=None, help="phantom spec file (key=value)")
        sp.add_argument("--items", type=int, default=10)
        sp.add_argument("--slices", type=int, default=4, help="slices per item")
        sp.add_argument("--size", type=int, default=None, help="override the phantom grid size")

    def degrade_flags(sp):
        sp.add_argument("--noise-fraction", type=float, default=DEFAULT_NOISE_FRACTION)
        sp.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
        sp.add_argument("--kernel-table", default=None, help="scatter kernel CSV")

    sp = add("generate", cmd_generate, "phantom collection and defect table")
    gen_flags(sp)

    sp = add("project", cmd_project, "parallel-beam sinograms (dataset a)")
    sp.add_argument("--angles", type=int, default=50)
    sp.add_argument("--upsample", type=int, default=2, help="inverse-crime upsampling factor")

    sp = add("degrade", cmd_degrade, "noise (dataset b) and scatter (dataset c)")
    sp.add_argument("--dataset", choices=("b", "c", "all"), default="all")
    degrade_flags(sp)

    sp = add("reconstruct", cmd_reconstruct, "FBP or CGLS reconstruction")
    sp.add_argument("--dataset", choices=DATASETS, default="a")
    sp.add_argument("--method", choices=("fbp", "cgls"), default="fbp")
    sp.add_argument("--sampling", choices=SAMPLINGS, default="full")
    sp.add_argument("--iterations", type=int, default=15)
    sp.add_argument("--size", type=int, default=None, help="output grid size")

    sp = add("split", cmd_split, "bias-free subset selection")
    split_sub = sp.add_subparsers(dest="method", required=True)
    for name in ("empirical", "miqp"):
        ss = split_sub.add_parser(name, parents=[glob])
        ss.set_defaults(func=cmd_split)
        ss.add_argument("--table", default=None, help="defect CSV (default phantoms/defects.csv)")
        ss.add_argument("--columns", default=None, help="comma-separated defect columns")
        ss.add_argument("--n", type=int, default=None, help="subset size (default 20%% of items)")
        ss.add_argument("--timing", action="store_true", default=False,
                        help="include wall time in the report")
        if name == "empirical":
            ss.add_argument("--target", type=float, default=0.2)
            ss.add_argument("--samples", type=int, default=10_000)
            ss.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
            ss.add_argument("--primary", default=DEFAULT_PRIMARY)
        else:
            ss.add_argument("--targets", default="0.2", help="one value or one per defect")
            ss.add_argument("--gap", type=float, default=DEFAULT_GAP)
            ss.add_argument("--node-limit", type=int, default=DEFAULT_NODE_LIMIT)
            ss.add_argument("--time-limit", type=float, default=None)

    sp = add("evaluate", cmd_evaluate, "PSNR/SSIM report")
    sp.add_argument("--recon", required=True, help="reconstruction directory")
    sp.add_argument("--truth", default=None, help="ground-truth directory (default phantoms)")
    sp.add_argument("--report", default=None, help="output CSV")

    sp = add("pipeline", cmd_pipeline, "run every stage")
    gen_flags(sp)
    sp.add_argument("--angles", type=int, default=50)
    sp.add_argument("--upsample", type=int, default=2)
    degrade_flags(sp)
    sp.add_argument("--iterations", type=int, default=15)
    sp.add_argument("--target", type=float, default=0.2)
    sp.add_argument("--split-n", type=int, default=None)
    sp.add_argument("--samples", type=int, default=10_000)
    sp.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    sp.add_argument("--gap", type=float, default=DEFAULT_GAP)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    args.out = str(args.out)
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"ctbench: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CtbenchError as exc:
        print(f"ctbench: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
