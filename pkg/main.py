"""Batch driver: compile, verify, simulate and report BASE vs SARIS over the kernel catalog."""
from dotenv import load_dotenv
load_dotenv()

import argparse
import difflib
import math
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import pandas as pd
from sqlalchemy.exc import SQLAlchemyError

import utils
from cluster_sim import VARIANTS, DmaModel, geomean, run_cluster
from core_program import RegisterAllocationError, format_listing
from saris_compiler import CompileError, OptConfig
from scaleout_model import (
    PEAK_FRACTION_FOOTNOTES,
    MachineDescriptor,
    ScaleoutInputError,
    estimate,
    load_machine,
    suite_summary,
)
from stencil_ir import CATALOG_ORDER, TileShape, kernel_by_name

METRICS_HEADER = "# saris-metrics v1"
METRICS_COLUMNS = ["kernel", "variant", "cycles", "fpu_util", "ipc", "speedup", "dma_bw_util", "imbalance_max"]
UNROLL_CANDIDATES = (1, 2, 4)
POLICY_CANDIDATES = ("interleave", "aggressive")
FLOAT_FORMAT = "%.6f"
TIMING_FLAGS = ("fpu_latency", "tcdm_latency", "fifo_depth", "frep_length")


@dataclass(frozen=True)
class Job:
    kernel: str
    variant: str
    tile: tuple | None
    opt: OptConfig
    timing: object
    dma: DmaModel
    seed: int
    unroll: str = "auto"
    policy: str = "auto"
    emit_asm: bool = False
    trace: bool = False


@dataclass
class JobResult:
    kernel: str
    variant: str
    metrics: object = None
    listing: str = ""
    trace: list = field(default_factory=list)
    error: str = ""


def _candidates(unroll: str, policy: str) -> list:
    unrolls = UNROLL_CANDIDATES if unroll == "auto" else (int(unroll),)
    policies = POLICY_CANDIDATES if policy == "auto" else (policy,)
    return [(p, u) for p in policies for u in unrolls]


def parse_tile(text: str) -> tuple:
    """"64" for every kernel, or "64,16" for 2D and 3D kernels respectively."""
    try:
        extents = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tile must be N or N2D,N3D, got {text!r}")
    if len(extents) not in (1, 2) or min(extents) < 1:
        raise argparse.ArgumentTypeError(f"tile must be N or N2D,N3D, got {text!r}")
    return extents


def tile_extent(tile: tuple | None, spec) -> int | None:
    if not tile:
        return None
    if len(tile) == 1:
        return tile[0]
    return tile[0] if spec.dims == 2 else tile[1]


def run_job(job: Job) -> JobResult:
    """One kernel x variant; "auto" unroll and policy keep the fastest verified candidate."""
    result = JobResult(job.kernel, job.variant)
    try:
        spec = kernel_by_name(job.kernel)
        tile = TileShape.for_spec(spec, tile_extent(job.tile, spec))
        best = None
        last_error = None
        for policy, u in _candidates(job.unroll, job.policy):
            opt = replace(job.opt, unroll=u, reassociation=policy)
            try:
                metrics, cores = run_cluster(spec, job.variant, tile, opt, job.timing, job.seed,
                                             job.dma, trace=job.trace)
            except (CompileError, RegisterAllocationError) as e:
                last_error = e
                continue
            if best is None or metrics.cycles < best[0].cycles:
                best = (metrics, cores, opt)
        if best is None:
            raise last_error
        metrics, cores, opt = best
        result.metrics = metrics
        if job.emit_asm:
            result.listing = format_listing(cores[0].program)
        if job.trace:
            result.trace = cores[0].trace
    except (ValueError, RuntimeError) as e:
        result.error = f"{type(e).__name__}: {e}"
    return result


def _order_key(result: JobResult) -> tuple:
    kernels = list(CATALOG_ORDER)
    k = kernels.index(result.kernel) if result.kernel in kernels else len(kernels)
    return k, result.kernel, VARIANTS.index(result.variant)


def metrics_frame(results: list) -> pd.DataFrame:
    cycles = {(r.kernel, r.variant): r.metrics.cycles for r in results if r.metrics}
    rows = []
    for r in results:
        if r.metrics is None:
            continue
        m = r.metrics
        base = cycles.get((r.kernel, "base"))
        speedup = base / m.cycles if base and m.cycles else math.nan
        rows.append({
            "kernel": r.kernel,
            "variant": r.variant,
            "cycles": m.cycles,
            "fpu_util": m.fpu_util,
            "ipc": m.ipc,
            "speedup": speedup,
            "dma_bw_util": m.dma_bw_util,
            "imbalance_max": m.imbalance_max,
        })
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def write_metrics_csv(df: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        df.to_csv(fh, index=False, float_format=FLOAT_FORMAT, na_rep="")


def scaleout_frame(results: list, machine: MachineDescriptor, tile: tuple | None) -> tuple:
    by_kernel = {}
    for r in results:
        if r.metrics is not None:
            by_kernel.setdefault(r.kernel, {})[r.variant] = r.metrics
    estimates = []
    for kernel, metrics in by_kernel.items():
        if set(metrics) != set(VARIANTS):
            continue
        spec = kernel_by_name(kernel)
        estimates.append(estimate(spec, metrics, machine, TileShape.for_spec(spec, tile_extent(tile, spec))))
    df = pd.DataFrame([{
        "kernel": e.kernel,
        "fpu_util_base": e.fpu_util_base,
        "fpu_util_saris": e.fpu_util_saris,
        "speedup": e.speedup,
        "cmtr": e.cmtr,
        "bound": e.bound,
        "gflops": e.gflops,
        "peak_fraction": e.peak_fraction,
    } for e in estimates], columns=["kernel", "fpu_util_base", "fpu_util_saris", "speedup", "cmtr",
                                    "bound", "gflops", "peak_fraction"])
    return df, estimates


def write_plot_data(metrics_df: pd.DataFrame, scaleout_df: pd.DataFrame, out: Path) -> None:
    saris = metrics_df[metrics_df["variant"] == "saris"]
    saris[["kernel", "speedup"]].to_csv(out / "speedup.tsv", sep="\t", index=False,
                                        float_format=FLOAT_FORMAT, na_rep="")
    if metrics_df.empty:
        util = pd.DataFrame(columns=["kernel"])
    else:
        util = metrics_df.pivot(index="kernel", columns="variant", values=["fpu_util", "ipc"])
        util.columns = [f"{metric}_{variant}" for metric, variant in util.columns]
        util = util.reindex(list(dict.fromkeys(metrics_df["kernel"]))).rename_axis("kernel").reset_index()
    util.to_csv(out / "utilization.tsv", sep="\t", index=False, float_format=FLOAT_FORMAT, na_rep="")
    scaleout_df[["kernel", "fpu_util_base", "fpu_util_saris", "speedup", "cmtr"]].to_csv(
        out / "scaleout.tsv", sep="\t", index=False, float_format=FLOAT_FORMAT)


def summary_markdown(metrics_df: pd.DataFrame, estimates: list, failures: list) -> str:
    lines = ["# SARIS suite summary", ""]
    lines.append("| variant | geomean fpu_util | geomean ipc |")
    lines.append("|---|---|---|")
    for variant in VARIANTS:
        rows = metrics_df[metrics_df["variant"] == variant]
        if rows.empty:
            continue
        lines.append(f"| {variant} | {geomean(rows['fpu_util']):.3f} | {geomean(rows['ipc']):.3f} |")
    speedups = metrics_df.loc[metrics_df["variant"] == "saris", "speedup"].dropna()
    if not speedups.empty:
        lines += ["", f"Single-cluster geomean speedup: {geomean(speedups):.3f}x"]
    if estimates:
        s = suite_summary(estimates)
        lines += [
            "",
            "## Scaleout estimate",
            "",
            f"- geomean FPU utilization: base {s['fpu_util_base']:.3f}, saris {s['fpu_util_saris']:.3f}",
            f"- geomean speedup: {s['speedup']:.3f}x",
            f"- memory-bound kernels: {s['memory_bound']} of {len(estimates)}",
        ]
        if s["memory_bound_speedup"] is None:
            lines.append("- memory-bound geomean speedup: undefined (no memory-bound kernels)")
        else:
            lines.append(f"- memory-bound geomean speedup: {s['memory_bound_speedup']:.3f}x")
        lines.append(f"- peak throughput: {s['peak_gflops']:.1f} GFLOP/s "
                     f"({100 * s['peak_fraction']:.0f}% of peak)")
        lines += ["", "Highest reported fractions of peak compute elsewhere:", ""]
        for name, device, precision, fraction in PEAK_FRACTION_FOOTNOTES:
            lines.append(f"- {name} ({device}, {precision}): {100 * fraction:.0f}%")
    if failures:
        lines += ["", "## Failures", ""]
        lines += [f"- {r.kernel}/{r.variant}: {r.error}" for r in failures]
    return "\n".join(lines) + "\n"


def diff_listings(golden_dir, emitted_dir) -> dict:
    """Byte comparison of every golden listing; value is (passed, unified diff lines)."""
    golden_dir, emitted_dir = Path(golden_dir), Path(emitted_dir)
    outcome = {}
    for golden in sorted(golden_dir.glob("*.s")):
        emitted = emitted_dir / golden.name
        if not emitted.exists():
            outcome[golden.stem] = (False, [f"missing {emitted}"])
            continue
        want, got = golden.read_bytes(), emitted.read_bytes()
        if want == got:
            outcome[golden.stem] = (True, [])
            continue
        diff = difflib.unified_diff(want.decode().splitlines(), got.decode().splitlines(),
                                    str(golden), str(emitted), lineterm="")
        outcome[golden.stem] = (False, list(diff))
    return outcome


def _run_all(jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_job, jobs))


def run_suite(kernels, variants, tile, opt, machine, timing, dma=None, seed=42, unroll="auto",
              out="artifacts", csv_path=None, emit_asm=False, trace=False, bless=False,
              golden="goldens", jobs=1, archive=False, quiet=False, policy="auto") -> int:
    """Run every kernel x variant, write the artifacts and return the exit status."""
    def say(msg):
        if not quiet:
            print(msg, flush=True)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dma = dma or DmaModel()
    work = [Job(k, v, tile, opt, timing, dma, seed, unroll=unroll, policy=policy,
                emit_asm=emit_asm or bless, trace=trace)
            for k in kernels for v in variants]
    say(f"📡 Running {len(work)} jobs on {jobs} worker(s)")
    results = sorted(_run_all(work, jobs), key=_order_key)

    failures = [r for r in results if r.error]
    for r in results:
        if r.error:
            say(f"⛔ {r.kernel}/{r.variant}: {r.error}")
        else:
            say(f"✅ {r.kernel}/{r.variant}: {r.metrics.cycles} cycles, "
                f"fpu_util {r.metrics.fpu_util:.3f}, ipc {r.metrics.ipc:.3f}")

    metrics_df = metrics_frame(results)
    write_metrics_csv(metrics_df, Path(csv_path) if csv_path else out / "metrics.csv")
    try:
        scaleout_df, estimates = scaleout_frame(results, machine, tile)
    except ScaleoutInputError as e:
        say(f"⚠️ Scaleout skipped: {e}")
        scaleout_df, estimates = scaleout_frame([], machine, tile)
    scaleout_df.to_csv(out / "scaleout.csv", index=False, float_format=FLOAT_FORMAT)
    write_plot_data(metrics_df, scaleout_df, out)
    (out / "summary.md").write_text(summary_markdown(metrics_df, estimates, failures))

    if emit_asm or bless:
        asm_dir = out / "asm"
        asm_dir.mkdir(exist_ok=True)
        for r in results:
            if r.listing:
                (asm_dir / f"{r.kernel}.{r.variant}.s").write_text(r.listing)
        if bless:
            Path(golden).mkdir(parents=True, exist_ok=True)
            for listing in sorted(asm_dir.glob("*.s")):
                shutil.copyfile(listing, Path(golden) / listing.name)
            say(f"✅ Blessed listings into {golden}")
    if trace:
        trace_dir = out / "trace"
        trace_dir.mkdir(exist_ok=True)
        for r in results:
            if r.trace:
                (trace_dir / f"{r.kernel}.{r.variant}.core0.txt").write_text("\n".join(r.trace) + "\n")

    if archive and not metrics_df.empty:
        tile_label = "x".join(map(str, tile)) if tile else "default"
        run_key = f"tile{tile_label}-cores{opt.cores}-unroll{unroll}-{policy}-seed{seed}"
        try:
            utils.init_db()
            utils.save_report_data(run_key, metrics_df)
            say(f"✅ Archived {len(metrics_df)} rows under {run_key}")
        except SQLAlchemyError as e:
            say(f"⚠️ Archive unavailable: {e}")

    say(f"✅ Artifacts written to {out}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saris", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="compile, verify and simulate kernels")
    which = run.add_mutually_exclusive_group(required=True)
    which.add_argument("--kernel", action="append", help="kernel name (repeatable)")
    which.add_argument("--all", action="store_true", help="every catalog kernel")
    run.add_argument("--variants", default="base,saris")
    run.add_argument("--tile", type=parse_tile, default=None,
                     help="tile extent per axis with halo: N, or N2D,N3D")
    run.add_argument("--unroll", default="auto", choices=["auto", "1", "2", "3", "4"])
    run.add_argument("--cores", type=int, default=8)
    run.add_argument("--policy", default="auto", choices=["auto", "none", "interleave", "aggressive"],
                     help="reassociation policy; auto keeps the faster of interleave and aggressive")
    run.add_argument("--fpu-latency", dest="fpu_latency", type=int, help="overrides SARIS_FPU_LATENCY")
    run.add_argument("--tcdm-latency", dest="tcdm_latency", type=int, help="overrides SARIS_TCDM_LATENCY")
    run.add_argument("--fifo-depth", dest="fifo_depth", type=int, help="overrides SARIS_FIFO_DEPTH")
    run.add_argument("--frep-length", dest="frep_length", type=int, help="overrides SARIS_FREP_LENGTH")
    run.add_argument("--no-frep", action="store_true", help="do not use the hardware loop")
    run.add_argument("--machine", help="machine descriptor file (KEY=value)")
    run.add_argument("--emit-asm", action="store_true")
    run.add_argument("--trace", action="store_true")
    run.add_argument("--seed", type=int, default=utils.env_int("SARIS_SEED", 42))
    run.add_argument("--csv", help="metrics CSV path (default <out>/metrics.csv)")
    run.add_argument("--bless", action="store_true", help="copy emitted listings into --golden")
    run.add_argument("--golden", default="goldens")
    run.add_argument("--out", default="artifacts")
    run.add_argument("--jobs", type=int, default=utils.env_int("SARIS_JOBS", os.cpu_count() or 1))
    run.add_argument("--archive", action="store_true", help="store metrics in DATABASE_URL")
    run.add_argument("--quiet", action="store_true")

    diff = sub.add_parser("diff", help="compare emitted listings against goldens")
    diff.add_argument("--golden", default="goldens")
    diff.add_argument("--emitted", default="artifacts/asm")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "diff":
        outcome = diff_listings(args.golden, args.emitted)
        if not outcome:
            print(f"⚠️ No golden listings in {args.golden}", flush=True)
            return 1
        for name, (passed, lines) in outcome.items():
            print(f"{'✅' if passed else '⛔'} {name}", flush=True)
            for line in lines:
                print(line, flush=True)
        return 0 if all(p for p, _ in outcome.values()) else 1

    kernels = list(CATALOG_ORDER) if args.all else args.kernel
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        for name in kernels:
            kernel_by_name(name)
        bad = [v for v in variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variant(s) {', '.join(bad)}")
        machine = load_machine(args.machine) if args.machine else \
            MachineDescriptor(pins=utils.env_int("SARIS_HBM_PINS", 128))
        timing = utils.timing_from_env()
        overrides = {name: getattr(args, name) for name in TIMING_FLAGS if getattr(args, name) is not None}
        if overrides:
            timing = replace(timing, **overrides)
        opt = OptConfig(
            reassociation=POLICY_CANDIDATES[0] if args.policy == "auto" else args.policy,
            hardware_loop=not args.no_frep,
            cores=args.cores,
            regfile_budget=utils.env_int("SARIS_REGFILE_BUDGET", 12),
            launch_cost=utils.env_int("SARIS_LAUNCH_COST", 3),
            frep_length=timing.frep_length,
            fpu_latency=timing.fpu_latency,
        )
        dma = DmaModel(init_latency=utils.env_int("SARIS_DMA_INIT_LATENCY", 100))
    except (KeyError, ValueError) as e:
        print(f"⛔ {e}", flush=True)
        return 2

    return run_suite(kernels, variants, args.tile, opt, machine, timing, dma, args.seed, args.unroll,
                     args.out, args.csv, args.emit_asm, args.trace, args.bless, args.golden,
                     args.jobs, args.archive, args.quiet, policy=args.policy)


if __name__ == "__main__":
    sys.exit(main())
