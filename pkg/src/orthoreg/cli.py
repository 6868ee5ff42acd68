"""Command-line entry point: ``orthoreg <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import measures, relaxation, trainer
from .gradcheck import DEFAULT_STEP, DEFAULT_TOL, finite_difference, relative_error
from .measures import RegularizerSpec, Variant
from .tensor import ArchitectureError, TensorFormatError, as_matrix, load_architecture, read_tensor_file

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MEASURES = {
    "frobenius": Variant.FROBENIUS,
    "scaled-frobenius": Variant.SCALED_FROBENIUS,
    "srip": Variant.SRIP,
    "disentangled": Variant.DISENTANGLED,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(args, payload, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _read_tensor(path: str):
    try:
        return read_tensor_file(path)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror or e}") from None
    except (TensorFormatError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


def _read_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from None


# --- report ---------------------------------------------------------------

def cmd_report(args) -> int:
    named = []
    for path in args.files:
        t = _read_tensor(path)
        named.append((t.name, as_matrix(t)))
    if args.group_by_shape:
        groups = measures.group_by_shape(named)
        reports = list(measures.aggregate_reports(groups).values())
        counts = [len(v) for v in groups.values()]
    else:
        reports = [measures.near_orth_report(K, name) for name, K in named]
        counts = [1] * len(reports)
    lines = [f"{'layer':<24} {'corr mean ± std/diag':>22}"]
    for r, n in zip(reports, counts):
        label = r.layer_name + (f" ({n} layers)" if args.group_by_shape else "")
        note = "  (single filter: no pairs)" if r.undefined_tril else ""
        lines.append(f"{label:<24} {r.format():>22}{note}")
    _emit(args, [r.to_dict() for r in reports], "\n".join(lines))
    return EXIT_OK


# --- plan -----------------------------------------------------------------

def _plan_table(plan) -> str:
    lines = [f"{'layer':<16} {'o':>5} {'d':>6} {'class':<16} {'struct':>6} {'freed':>6} "
             f"{'pairs':>10} {'ratio':>8} {'exempt':>7} {'+/-':>9}"]
    for e in plan:
        lines.append(f"{e.layer:<16} {e.o:>5} {e.d:>6} {e.determinacy.value:<16} {e.structural_dim:>6} "
                     f"{e.freed_count:>6} {e.expected_relaxed_pairs:>10.6g} {e.ratio:>8.4g} "
                     f"{e.exempt_total:>7} {f'{e.exempt_positive}/{e.exempt_negative}':>9}")
    return "\n".join(lines)


def cmd_plan(args) -> int:
    try:
        text = Path(args.architecture).read_text()
    except OSError as e:
        raise DataError(f"cannot read {args.architecture}: {e.strerror or e}") from None
    try:
        layers = load_architecture(text)
        transition = relaxation.TransitionConfig(args.attribute, args.intrinsic, args.max_transition)
        ratio = relaxation.RatioMapConfig(args.least_ratio, args.pattern)
    except (ArchitectureError, ValueError) as e:
        raise DataError(str(e)) from None
    plan = relaxation.build_plan(layers, transition, ratio, args.trials, args.seed)
    serialized = relaxation.dump_plan(plan)
    if args.out:
        Path(args.out).write_text(serialized)
    if args.json:
        sys.stdout.write(serialized)
    else:
        print(_plan_table(plan))
    return EXIT_OK


# --- loss / gradcheck -----------------------------------------------------

def _spec_for(args, K: np.ndarray, name: str, variant: Variant, strict_mask: bool = True) -> RegularizerSpec:
    spec = RegularizerSpec(variant, args.lambda_diag, args.iterations, args.seed)
    if args.mask is None:
        return spec
    if variant is not Variant.DISENTANGLED:
        if not strict_mask:
            return spec
        raise UsageError("--mask only applies to --measure disentangled")
    try:
        plan = relaxation.load_plan(json.dumps(_read_json(args.mask)))
    except (KeyError, ValueError, TypeError) as e:
        raise DataError(f"{args.mask}: not a relaxation plan ({e})") from None
    o, d = K.shape
    entry = next((e for e in plan if e.layer == name), None)
    if entry is None:
        same = [e for e in plan if (e.o, e.d) == (o, d)]
        if len(same) != 1:
            raise DataError(f"no plan entry for layer {name!r} ({o}x{d}) in {args.mask}")
        entry = same[0]
    if (entry.o, entry.d) != (o, d):
        raise DataError(f"plan entry {entry.layer!r} is {entry.o}x{entry.d}, tensor is {o}x{d}")
    try:
        tril = measures.correlation_tril(K)
    except measures.DegenerateFilterError as e:
        raise NumericalFailure(str(e)) from None
    mask = relaxation.build_exemption_mask(tril, entry.exempt_positive, entry.exempt_negative, o=o)
    return spec.with_mask(mask)


def cmd_loss(args) -> int:
    t = _read_tensor(args.tensor)
    K = as_matrix(t)
    spec = _spec_for(args, K, t.name, MEASURES[args.measure])
    try:
        result = measures.evaluate(K, spec)
    except measures.DegenerateFilterError as e:
        raise NumericalFailure(str(e)) from None
    payload = {"tensor": t.name, "o": K.shape[0], "d": K.shape[1], "spec": spec.to_dict(),
               "result": result.to_dict()}
    text = f"{t.name} [{K.shape[0]},{K.shape[1]}] {spec.variant.value}: total {result.total:.10g}"
    if spec.variant in (Variant.DISENTANGLED, Variant.RELAXED_DISENTANGLED):
        text += (f"  corr {result.corr_component:.10g}  diag {result.diag_component:.10g}"
                 f"  lambda {spec.lambda_diag:g}")
        if spec.exemption_mask is not None:
            text += f"  exempt pairs {len(spec.exemption_mask.exempt)}"
    _emit(args, payload, text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t = _read_tensor(args.tensor)
    K = np.array(as_matrix(t))
    names = list(MEASURES) if args.measure == "all" else [args.measure]
    rows = []
    for name in names:
        spec = _spec_for(args, K, t.name, MEASURES[name], strict_mask=args.measure != "all")
        res = measures.regularizer_gradient(K, spec)
        if res.degenerate:
            raise NumericalFailure(f"{name}: gradient undefined at this kernel (degenerate input)")
        numeric = finite_difference(lambda X: measures.evaluate(X, spec).total, K, args.step)
        err = relative_error(res.gradient, numeric)
        rows.append({"measure": spec.variant.value, "max_relative_error": err, "passed": err <= args.tol})
    ok = all(r["passed"] for r in rows)
    text = "\n".join(f"{r['measure']:<22} rel.err {r['max_relative_error']:.3e}  "
                     f"{'PASS' if r['passed'] else 'FAIL'}" for r in rows)
    _emit(args, {"tensor": t.name, "step": args.step, "tol": args.tol, "checks": rows, "passed": ok}, text)
    return EXIT_OK if ok else EXIT_NUMERIC


# --- simulate / verify ----------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        est, se = relaxation.simulate_relaxed_pairs(args.freed, args.boxes, args.trials, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    closed = relaxation.closed_form_pairs(args.freed, args.boxes)
    payload = {"freed": args.freed, "boxes": args.boxes, "trials": args.trials, "seed": args.seed,
               "estimate": est, "stderr": se, "closed_form": closed}
    text = (f"freed {args.freed} boxes {args.boxes} trials {args.trials} seed {args.seed}\n"
            f"estimate    {est:.6f} ± {se:.6f}\nclosed form {closed:.6f}")
    _emit(args, payload, text)
    return EXIT_OK


def cmd_verify(args) -> int:
    t = _read_tensor(args.tensor)
    K = as_matrix(t)
    direct = measures.frobenius_loss(K).total
    decomposed = measures.decomposed_frobenius(K)
    diff = abs(decomposed - direct)
    rel = diff / direct if direct > 0 else diff
    ok = rel <= args.tol
    payload = {"tensor": t.name, "direct": direct, "decomposed": decomposed,
               "relative_difference": rel, "passed": ok}
    text = (f"{t.name}: ||KK^T - I||_F  direct {direct:.17g}\n"
            f"{'':{len(t.name) + 2}}from diag+tril  {decomposed:.17g}\n"
            f"relative difference {rel:.3e}  {'PASS' if ok else 'FAIL'}")
    _emit(args, payload, text)
    return EXIT_OK if ok else EXIT_NUMERIC


# --- train / demo ---------------------------------------------------------

def _load_config(path: str) -> trainer.TrainConfig:
    raw = _read_json(path)
    try:
        return trainer.TrainConfig.from_dict(raw)
    except (TypeError, ValueError, KeyError) as e:
        raise DataError(f"{path}: invalid training config: {e}") from None


def cmd_train(args) -> int:
    config = _load_config(args.config)
    try:
        net, history = trainer.train(config)
    except trainer.TrainingError as e:
        raise NumericalFailure(str(e)) from None
    except ValueError as e:
        raise DataError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.jsonl").write_text(history.to_jsonl())
    (out / "scheduler.jsonl").write_text(history.scheduler_jsonl())
    summary = history.summary_table()
    (out / "summary.txt").write_text(summary)
    _emit(args, {"final": history.final, "scheduler": history.scheduler}, summary)
    return EXIT_OK


def cmd_demo(args) -> int:
    config = _load_config(args.config)
    sweep = tuple(args.c_reg) if args.c_reg else trainer.DEFAULT_SWEEP
    try:
        report = trainer.inaccessible_orthogonality_demo(config, sweep)
    except trainer.TrainingError as e:
        raise NumericalFailure(str(e)) from None
    except ValueError as e:
        raise DataError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "demo.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out / "demo.txt").write_text(report.table())
    _emit(args, report.to_dict(), report.table())
    if not all(r.above_floor for r in report.rows):
        return EXIT_NUMERIC
    return EXIT_OK


# --- wiring ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="orthoreg", description="Kernel orthogonality measures, relaxation plans and a toy trainer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.set_defaults(func=func)
        return sp

    sp = add("report", cmd_report, "near-orthogonality statistics per layer")
    sp.add_argument("files", nargs="+", help="KTSR tensor files")
    sp.add_argument("--group-by-shape", action="store_true", help="average layers sharing (o, d)")

    sp = add("plan", cmd_plan, "relaxation plan for an architecture")
    sp.add_argument("architecture", help="architecture JSON")
    sp.add_argument("--attribute", type=int, default=10, help="dataset class/attribute count")
    sp.add_argument("--intrinsic", type=int, default=30)
    sp.add_argument("--max-transition", type=int, default=100)
    sp.add_argument("--least-ratio", type=float, default=0.0)
    sp.add_argument("--pattern", choices=[x.value for x in relaxation.Pattern], default="log")
    sp.add_argument("--trials", type=int, default=relaxation.DEFAULT_TRIALS)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="write plan JSON here")

    for name, func, help in (("loss", cmd_loss, "evaluate a regularizer on a kernel"),
                             ("gradcheck", cmd_gradcheck, "compare analytic gradients with finite differences")):
        sp = add(name, func, help)
        sp.add_argument("tensor")
        choices = list(MEASURES) + (["all"] if name == "gradcheck" else [])
        sp.add_argument("--measure", choices=choices, default="all" if name == "gradcheck" else "disentangled")
        sp.add_argument("--lambda", dest="lambda_diag", type=float, default=0.1)
        sp.add_argument("--iterations", type=int, default=2, help="SRIP power-iteration rounds")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--mask", help="plan JSON; exempts pairs for the relaxed disentangled norm")
        if name == "gradcheck":
            sp.add_argument("--step", type=float, default=DEFAULT_STEP)
            sp.add_argument("--tol", type=float, default=DEFAULT_TOL)

    sp = add("simulate", cmd_simulate, "Monte Carlo estimate of relaxed pairs")
    sp.add_argument("--freed", type=int, required=True)
    sp.add_argument("--boxes", type=int, required=True)
    sp.add_argument("--trials", type=int, default=relaxation.DEFAULT_TRIALS)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("verify", cmd_verify, "check the diag/tril decomposition of the Frobenius norm")
    sp.add_argument("tensor")
    sp.add_argument("--tol", type=float, default=1e-10)

    sp = add("train", cmd_train, "train the toy network from a JSON config")
    sp.add_argument("config")
    sp.add_argument("--out", default="run", help="output directory")

    sp = add("demo-inaccessible", cmd_demo, "Frobenius floor on an over-determined layer")
    sp.add_argument("config")
    sp.add_argument("--out", default="demo", help="output directory")
    sp.add_argument("--c-reg", type=float, nargs="+", help="sweep values (default 0 0.01 0.1 1)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"orthoreg: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"orthoreg: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as e:
        print(f"orthoreg: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
