"""Command-line driver binding the pipeline end to end.

Commands: ``fit``, ``simulate``, ``evaluate``, ``scores``, ``convert``.
Exit codes are stable: 0 success, 2 validation/usage failure,
3 identifiability failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import resolve_threads
from .blup import score_new_panel, write_scores_csv
from .design import read_metadata, write_metadata
from .errors import IdentifiabilityError, NumericalError, ValidationError
from .fit import fit_panel, load_model, save_model, variance_explained
from .gram import left_vectors
from .panel import panel_from_csv, panel_to_csv, read_panel, write_panel
from .simulate import (LATTICE_DIMS, ScenarioSpec, evaluate, generate_scenario1,
                       generate_scenario2, load_truth, save_truth)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IDENTIFIABILITY = 3
EXIT_NUMERICAL = 4


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except IdentifiabilityError as exc:
        print(f"identifiability error: {exc}", file=sys.stderr)
        return EXIT_IDENTIFIABILITY
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfpca",
                                     description="Longitudinal functional PCA toolkit")
    parser.add_argument("--version", action="version", version=f"lfpca {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit the model to a panel")
    fit.add_argument("--data", required=True, help="LFPB panel file")
    fit.add_argument("--meta", required=True, help="metadata CSV")
    fit.add_argument("--nx", type=int, default=None, help="subject-level components (default: auto)")
    fit.add_argument("--nw", type=int, default=None, help="visit-level components (default: auto)")
    fit.add_argument("--var-threshold", type=float, default=0.9999,
                     help="spectrum mass kept when the rank is auto")
    fit.add_argument("--order-threshold", type=float, default=0.9,
                     help="spectrum mass used to auto-select component counts")
    fit.add_argument("--slices", type=int, default=None, help="processing slice count")
    fit.add_argument("--rank", default="auto", help="retained rank, integer or 'auto'")
    fit.add_argument("--model", choices=["intercept-slope", "general"], default="general")
    fit.add_argument("--backend", choices=["dense", "power"], default="dense")
    fit.add_argument("--seed", type=int, default=0, help="seed for the power-iteration start block")
    fit.add_argument("--threads", type=int, default=None)
    fit.add_argument("--no-normalize", action="store_true",
                     help="skip covariate standardization")
    fit.add_argument("--write-v", action="store_true", help="also write v.lfpb")
    fit.add_argument("--dump-h", action="store_true", help="also write the weight matrix H as CSV")
    fit.add_argument("--out", default="lfpca_fit", help="output directory")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="generate synthetic panels")
    sim.add_argument("--scenario", type=int, choices=[1, 2], required=True)
    sim.add_argument("--p", type=int, default=None, help="grid size (scenario 1 only)")
    sim.add_argument("--sigma2", type=float, default=None, help="white-noise variance")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--reps", type=int, default=1)
    sim.add_argument("--subjects", type=int, default=None)
    sim.add_argument("--visits", type=int, default=None)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    ev = sub.add_parser("evaluate", help="compare fits against ground truth")
    ev.add_argument("--truth", required=True, help="simulation output directory")
    ev.add_argument("--fit", required=True, help="fit output directory")
    ev.add_argument("--out", required=True, help="metrics CSV")
    ev.set_defaults(func=cmd_evaluate)

    sc = sub.add_parser("scores", help="score new data under a saved model")
    sc.add_argument("--model", required=True, help="fit output directory")
    sc.add_argument("--data", required=True, help="LFPB panel file")
    sc.add_argument("--meta", required=True, help="metadata CSV")
    sc.add_argument("--threads", type=int, default=None)
    sc.add_argument("--out", required=True, help="scores CSV")
    sc.set_defaults(func=cmd_scores)

    cv = sub.add_parser("convert", help="convert panels to/from CSV (debugging, small p)")
    direction = cv.add_mutually_exclusive_group(required=True)
    direction.add_argument("--to-csv", action="store_true")
    direction.add_argument("--to-panel", action="store_true")
    cv.add_argument("--slices", type=int, default=1)
    cv.add_argument("input")
    cv.add_argument("output")
    cv.set_defaults(func=cmd_convert)
    return parser


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    t0 = time.monotonic()
    rank = _parse_rank(args.rank)
    if args.nx is not None and args.nx < 1:
        raise ValidationError("--nx must be >= 1 (or omitted for auto)")
    if args.nw is not None and args.nw < 1:
        raise ValidationError("--nw must be >= 1 (or omitted for auto)")
    panel = read_panel(args.data)
    design = read_metadata(args.meta)
    if args.slices is not None:
        panel = panel.with_slices(args.slices)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    threads = resolve_threads(args.threads)
    result = fit_panel(panel, design, n_x=args.nx, n_w=args.nw, rank=rank,
                       var_threshold=args.var_threshold, order_threshold=args.order_threshold,
                       normalize=not args.no_normalize, parameterization=args.model,
                       backend=args.backend, seed=args.seed, threads=threads, workdir=outdir)
    model = result.model

    _write_eigenvalues(outdir / "eigenvalues.csv", model)
    variance_explained(model).write_csv(outdir / "variance_explained.csv")
    np.savetxt(outdir / "u.csv", result.decomposition.u, delimiter=",", fmt="%.17g")
    np.savetxt(outdir / "s.csv", result.decomposition.s, delimiter=",", fmt="%.17g")
    write_scores_csv(result.scores, outdir / "scores.csv")
    save_model(model, outdir)
    if args.write_v:
        centered = outdir / "centered.lfpb"
        source = read_panel(centered, centered=True) if centered.is_file() else panel
        if not source.centered:
            from .panel import center_panel
            source = center_panel(source)
        left_vectors(source, result.decomposition, out_path=outdir / "v.lfpb", threads=threads)
    if args.dump_h:
        np.savetxt(outdir / "h.csv", result.mom.h, delimiter=",", fmt="%.17g")
    centered = outdir / "centered.lfpb"
    if centered.is_file():
        centered.unlink()

    manifest = {
        "command": "fit",
        "version": __version__,
        "config": {
            "nx": model.n_x, "nw": model.n_w, "rank": rank, "var_threshold": args.var_threshold,
            "order_threshold": args.order_threshold, "slices": panel.n_slices,
            "model": args.model, "backend": args.backend, "seed": args.seed,
            "normalize": not args.no_normalize, "threads": threads,
            "condition_limit_ff": 1e12, "condition_limit_blup": 1e10,
        },
        "input_hashes": {args.data: _sha256(args.data), args.meta: _sha256(args.meta)},
        "timing_seconds": round(time.monotonic() - t0, 6),
        "p": model.p, "n": model.n, "q": model.q, "r": model.r,
        "clipped_count": model.clipped_count,
        "sigma2": model.sigma2,
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"fit complete: r={model.r}, n_x={model.n_x}, n_w={model.n_w}, "
          f"sigma2={model.sigma2:.6g}, out={outdir}")
    return EXIT_OK


def _parse_rank(raw):
    if raw is None or raw == "auto":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"--rank must be an integer or 'auto', got {raw!r}") from None


def _write_eigenvalues(path, model) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family", "component", "value"])
        for c, v in enumerate(model.lambda_x):
            writer.writerow(["x", c, f"{v:.17g}"])
        for c, v in enumerate(model.lambda_w):
            writer.writerow(["w", c, f"{v:.17g}"])


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.reps < 1:
        raise ValidationError("--reps must be >= 1")
    if args.scenario == 2:
        if args.p is not None and args.p != int(np.prod(LATTICE_DIMS)):
            raise ValidationError(
                f"scenario 2 has a fixed lattice of {int(np.prod(LATTICE_DIMS))} cells; omit --p")
        if args.sigma2 not in (None, 0.0):
            raise ValidationError("scenario 2 has no noise term; omit --sigma2")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for rep in range(args.reps):
        seed = args.seed + rep
        if args.scenario == 1:
            spec = ScenarioSpec.curves(
                p=args.p if args.p is not None else 750,
                sigma2=args.sigma2 if args.sigma2 is not None else 1e-4,
                seed=seed,
                n_subjects=args.subjects if args.subjects is not None else 100,
                n_visits=args.visits if args.visits is not None else 4)
            panel, design, truth = generate_scenario1(spec)
        else:
            spec = ScenarioSpec.blocks(
                seed=seed,
                n_subjects=args.subjects if args.subjects is not None else 150,
                n_visits=args.visits if args.visits is not None else 6)
            panel, design, truth = generate_scenario2(spec)
        rep_dir = outdir / f"rep_{rep:03d}"
        rep_dir.mkdir(parents=True, exist_ok=True)
        write_panel(panel, rep_dir / "panel.lfpb")
        write_metadata(design, rep_dir / "meta.csv")
        save_truth(truth, design, rep_dir / "truth")
    print(f"simulated {args.reps} replication(s) into {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def format_cell(mean: float, sd: float) -> str:
    """Aggregate table cell, e.g. ``0.034 (0.048)``."""
    return f"{round(mean, 3):g} ({round(sd, 3):g})"


def _find_pairs(truth_root: Path, fit_root: Path):
    """Match truth and fit directories, either a single pair or rep_* trees."""
    if (truth_root / "truth.json").is_file():
        return [("", truth_root, fit_root)]
    if (truth_root / "truth" / "truth.json").is_file():
        return [("", truth_root / "truth", fit_root)]
    reps = sorted(d.name for d in truth_root.glob("rep_*") if d.is_dir())
    if not reps:
        raise ValidationError(f"{truth_root} contains no ground truth (truth.json or rep_*)")
    pairs = []
    for name in reps:
        fit_dir = fit_root / name
        if not fit_dir.is_dir():
            raise ValidationError(f"fit directory missing replication {name}")
        pairs.append((name, truth_root / name / "truth", fit_dir))
    return pairs


def cmd_evaluate(args) -> int:
    truth_root, fit_root = Path(args.truth), Path(args.fit)
    if not truth_root.is_dir():
        raise ValidationError(f"truth directory not found: {truth_root}")
    if not fit_root.is_dir():
        raise ValidationError(f"fit directory not found: {fit_root}")
    pairs = _find_pairs(truth_root, fit_root)
    per_rep = []
    for name, truth_dir, fit_dir in pairs:
        truth = load_truth(truth_dir)
        model = load_model(fit_dir)
        scores_path = fit_dir / "scores.csv"
        scores = None
        if scores_path.is_file():
            from .blup import read_scores_csv
            scores = read_scores_csv(scores_path)
        per_rep.append((name, evaluate(truth, model, scores)))

    quant_names = ["score_q005", "score_q05", "score_q50", "score_q95", "score_q995"]
    header = (["kind", "replication", "family", "component", "evec_sq_dist", "lambda_rel_err"]
              + quant_names + ["evec_mean", "evec_sd", "cell"])
    rows = []
    for name, res in per_rep:
        for fam, dists in res.vector_distances.items():
            lam = res.lambda_errors.get("x" if fam.startswith("x") else "w")
            quants = res.score_quantiles.get("x" if fam == "x0" else ("w" if fam == "w" else None))
            for c, dist in enumerate(dists):
                lam_cell = f"{lam[c]:.17g}" if (fam in ("x0", "w") and c < lam.size) else ""
                qcells = ([f"{quants[qi, c]:.17g}" for qi in range(5)]
                          if quants is not None else [""] * 5)
                rows.append(["replication", name, fam, c, f"{dist:.17g}", lam_cell]
                            + qcells + ["", "", ""])
    families = per_rep[0][1].vector_distances.keys()
    for fam in families:
        stacked = np.vstack([res.vector_distances[fam] for _, res in per_rep])
        for c in range(stacked.shape[1]):
            mean = float(stacked[:, c].mean())
            sd = float(stacked[:, c].std(ddof=1)) if stacked.shape[0] > 1 else 0.0
            rows.append(["aggregate", "", fam, c, "", ""] + [""] * 5
                        + [f"{mean:.17g}", f"{sd:.17g}", format_cell(mean, sd)])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"evaluated {len(per_rep)} replication(s) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# scores / convert
# ---------------------------------------------------------------------------

def cmd_scores(args) -> int:
    model = load_model(args.model)
    panel = read_panel(args.data)
    design = read_metadata(args.meta)
    if panel.p != model.p:
        raise ValidationError(f"panel has p={panel.p}, model expects p={model.p}")
    scores = score_new_panel(model, panel, design, threads=resolve_threads(args.threads))
    write_scores_csv(scores, args.out)
    print(f"scored {design.n_subjects} subject(s) -> {args.out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    if args.to_csv:
        panel_to_csv(read_panel(args.input), args.output)
    else:
        write_panel(panel_from_csv(args.input, n_slices=args.slices), args.output)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
