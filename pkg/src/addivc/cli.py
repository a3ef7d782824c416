"""Command-line front end.

Exit codes: 0 success, 1 estimation did not converge, 2 input error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import diagnostics as dg
from . import io
from .estimator import (
    EstimationError,
    build_instrument_closed,
    build_instrument_open,
    estimate,
    model_output,
)
from .experiments import parameter_names, run_montecarlo
from .factoring import StructureMismatchError, factor_unfactored
from .lti import unpack_parameters
from .signals import UnstableLoopError, check_loop_stability, sensitivity_filter, simulate, snr_db

log = logging.getLogger("addivc")

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2, 3


def _cmd_simulate(args) -> int:
    cfg = io.experiment_from_dict(io.load_yaml(args.config))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    data = simulate(cfg)
    io.write_dataset_csv(args.out, data)
    print(f"N = {data.N}, h = {data.h:g}")
    if np.any(data.v.values):
        print(f"SNR = {snr_db(data.x, data.v):.2f} dB")
    else:
        print("SNR = inf (noise-free)")
    if cfg.closed_loop:
        poles = check_loop_stability(cfg.model, cfg.controller, cfg.h)
        print(f"closed loop stable, max pole modulus {np.abs(poles).max():.6f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _truth(cfg: dict):
    """True or nominal model and controller from a config, if present."""
    if "preset" in cfg:
        exp = io.experiment_from_dict({**cfg, "N": cfg.get("N", 1)})
        return exp.model, exp.controller
    model = io.model_from_dict(cfg["model"]) if "model" in cfg else None
    return model, None


def _controller(cfg: dict, preset_controller, h: float):
    if cfg.get("controller"):
        return io.controller_from_dict(cfg["controller"], h)
    return preset_controller


def _estimation_setup(cfg: dict, data, mode):
    model, preset_ctrl = _truth(cfg)
    if "structure" in cfg:
        structure = io.structure_from_dict(cfg["structure"])
    elif model is not None:
        structure = model.structure
    else:
        raise io.ConfigError("structure: required field missing (or give a model)")
    beta0 = io.initial_parameters(cfg.get("init", {}), structure, model)
    ctrl = _controller(cfg, preset_ctrl, data.h)
    mode = mode or cfg.get("mode") or ("closed" if ctrl is not None and data.r is not None else "open")
    controller = None
    if mode == "closed":
        if ctrl is None:
            raise io.ConfigError("controller: required in closed-loop mode")
        if data.r is None:
            raise io.ConfigError("data: closed-loop mode needs an r column")
        controller = ctrl
    elif mode != "open":
        raise io.ConfigError(f"mode: expected open or closed, got {mode!r}")
    return structure, beta0, controller, mode


def _cmd_estimate(args) -> int:
    cfg = io.load_yaml(args.config)
    data = io.read_dataset_csv(args.data)
    structure, beta0, controller, mode = _estimation_setup(cfg, data, args.mode)
    est_cfg = io.estimator_config_from_dict(cfg.get("estimator"))
    t0 = time.perf_counter()
    res = estimate(data, structure, beta0, est_cfg, controller)
    elapsed = time.perf_counter() - t0
    report = {
        "method": "SRIVC-equivalent (K=1)" if res.srivc_equivalent else "additive refined IV",
        "srivc_equivalent": res.srivc_equivalent,
        "mode": mode,
        "structure": {"orders": [list(o) for o in structure.orders],
                      "integrator_order": structure.integrator_order, "input_delay": structure.input_delay},
        "parameter_names": parameter_names(structure),
        "beta": res.beta,
        "model": io.model_to_dict(res.model),
        "converged": res.converged,
        "termination": res.termination,
        "iterations": res.iterations,
        "trajectory": res.trajectory,
        "condition_numbers": res.condition_numbers,
        "off_block_ratio": res.off_block,
        "orthogonality": res.orthogonality,
        "elapsed_s": elapsed,
    }
    io.write_json(args.out, report)
    print(f"{report['method']}, {mode} loop: {res.termination} after {res.iterations} iterations")
    for name, b in zip(report["parameter_names"], res.beta):
        print(f"  {name:>8s} = {b:.10g}")
    print(f"wrote {args.out}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _cmd_montecarlo(args) -> int:
    cfg = io.load_yaml(args.config)
    if args.seed is not None:
        cfg["base_seed"] = args.seed
    plan = io.plan_from_dict(cfg)
    report = run_montecarlo(plan, args.workers)
    paths = report.write(args.out)
    for v in plan.variants:
        fails = [report.failures(v, N) for N in plan.sizes]
        print(f"{v}: failures per N {dict(zip(plan.sizes, fails))}")
    print("wrote " + ", ".join(paths))
    return EXIT_OK


def _cmd_factor(args) -> int:
    cfg = io.load_yaml(args.config)
    tf = io.unfactored_from_dict(cfg.get("unfactored") or {})
    structure = io.structure_from_dict(io._get(cfg, "structure", "factor"))
    reference = io.model_from_dict(cfg["reference"], "reference") if "reference" in cfg else None
    fr = factor_unfactored(tf, structure, reference)
    w = np.logspace(-2, 2, 10) * max(1.0, float(np.abs(tf.poles()).max()) if tf.den.size > 1 else 1.0)
    ref = tf.freqresp(w)
    mismatch = float(np.max(np.abs(fr.freqresp(w) - ref) / np.maximum(np.abs(ref), 1e-300)))
    report = {
        "parameter_names": parameter_names(structure),
        "beta": fr.beta,
        "model": io.model_to_dict(fr.model),
        "dropped_numerator_coefficients": fr.dropped,
        "parts": [{"num": p.num, "den": p.den} for p in fr.parts],
        "freqresp_rel_mismatch": mismatch,
    }
    io.write_json(args.out, report)
    for name, b in zip(report["parameter_names"], fr.beta):
        print(f"  {name:>8s} = {b:.10g}")
    print(f"relative frequency-response mismatch {mismatch:.2e}; wrote {args.out}")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    cfg = io.load_yaml(args.config)
    data = io.read_dataset_csv(args.data)
    truth, preset_ctrl = _truth(cfg)
    ctrl = _controller(cfg, preset_ctrl, data.h)
    mode = args.mode or cfg.get("mode") or ("closed" if ctrl is not None and data.r is not None else "open")
    if mode == "closed" and (ctrl is None or data.r is None):
        raise io.ConfigError("controller: closed-loop diagnosis needs a controller and an r column")
    controller = ctrl if mode == "closed" else None
    if args.estimate:
        rep = io.read_json(args.estimate)
        structure = io.structure_from_dict(rep["structure"])
        current = unpack_parameters(np.asarray(rep["beta"], dtype=float), structure)
    elif truth is not None:
        current = truth
    else:
        raise io.ConfigError("model: give a true model in the config or an --estimate report")
    os.makedirs(args.out, exist_ok=True)
    h = data.h

    consistency = {"omitted": "true model not provided"}
    if truth is not None:
        consistency = dg.check_norm_condition(data, truth, current, controller).to_dict()
    ident = dg.identifiability_check(current).to_dict()

    if controller is None:
        zeta = build_instrument_open(data.u, current)
        z_true = data.u.values
    else:
        zeta = build_instrument_closed(data.r, current, controller)
        z_true = sensitivity_filter(data.r.values, truth, controller, h) if truth is not None else None
    psi = dg.optimal_instrument(z_true, truth, h) if truth is not None else zeta
    sigma2 = dg.residual_variance(data.y.values - model_output(data.u.values, current, h))
    P = dg.asymptotic_covariance(zeta, psi, sigma2)
    cov = dg.covariance_report(P).to_dict()
    cov["sigma2"] = sigma2
    cov["std_error"] = np.sqrt(np.maximum(np.diag(P), 0.0) / data.N)
    cov["parameter_names"] = parameter_names(current.structure)
    if truth is None:
        cov["note"] += "; gradient taken at the estimate (true model not provided)"

    io.write_json(os.path.join(args.out, "consistency.json"), {"consistency": consistency, "identifiability": ident})
    io.write_json(os.path.join(args.out, "covariance.json"), cov)
    if truth is not None:
        print(f"norm condition: ||E phihat Delta^T|| = {consistency['delta_norm']:.4g}, "
              f"sigma_min = {consistency['sigma_min']:.4g}, satisfied = {consistency['satisfied']}")
        print(f"unit-free ||M^-1 M_Delta||_2 = {consistency['relative_perturbation']:.4g}, "
              f"spectral radius {consistency['spectral_radius']:.4g}")
    else:
        print("norm condition omitted: true model not provided")
    print(f"wrote {args.out}/consistency.json and {args.out}/covariance.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="addivc", description="Additive continuous-time refined IV identification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a data record from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate", help="estimate an additive model from a CSV record")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output JSON report")
    p.add_argument("--mode", choices=("open", "closed"))
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("montecarlo", help="run a Monte Carlo plan")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_montecarlo)

    p = sub.add_parser("factor", help="split an unfactored transfer function into submodels")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output JSON report")
    p.set_defaults(func=_cmd_factor)

    p = sub.add_parser("diagnose", help="consistency and covariance reports")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--estimate", help="estimate report JSON (default: evaluate at the true model)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=("open", "closed"))
    p.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (io.ConfigError, FileNotFoundError, KeyError, StructureMismatchError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EstimationError, UnstableLoopError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
