"""Command-line front end: ``pagcert <subcommand> ...``.

Exit codes: 0 success, 1 negative result (not certified, bad run, law
check failed), 2 usage or parameter error, 3 oracle or protocol failure.
Progress goes to stderr; results go to stdout or files.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bounds, certifier, evaluation, quality
from .bounds import CertificateParams
from .errors import OracleError, PagError
from .external import ENV_COMMAND
from .model import load_model, save_model
from .oracles import OracleConfig
from .synthetic import SyntheticLinearWorld, synthetic_linear_world

log = logging.getLogger("pagcert")

EXIT_OK, EXIT_NEGATIVE, EXIT_USAGE, EXIT_ORACLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- shared argument groups --------------------------------------------------


def _add_params(p, with_pmin=True):
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    if with_pmin:
        p.add_argument("--p-min", type=float, required=True)
    p.add_argument("--d", type=int, default=bounds.QUALITY_VC_DIM, help="VC dimension of the range family")


def _add_oracle(p):
    p.add_argument("--model", help="model JSON file")
    p.add_argument("--oracle", choices=quality.LOCAL_ORACLES, default="ibp")
    p.add_argument("--external", help=f"external tool command line (or set {ENV_COMMAND})")
    p.add_argument("--timeout-ms", type=float, default=None)
    d = OracleConfig()
    p.add_argument("--radius-cap", type=float, default=d.radius_cap)
    p.add_argument("--pgd-step", type=float, default=d.pgd_step)
    p.add_argument("--pgd-steps", type=int, default=d.pgd_max_steps)
    p.add_argument("--binsearch-bits", type=int, default=d.binsearch_bits)
    p.add_argument("--grid-resolution", type=float, default=d.grid_resolution)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)


def _provider(args):
    command = args.external or os.environ.get(ENV_COMMAND)
    if command and args.model is None:
        return quality.ExternalProvider(command, args.timeout_ms), None
    if args.model is None:
        raise UsageError(f"need --model, --external or {ENV_COMMAND}")
    model = load_model(args.model)
    cfg = OracleConfig(
        radius_cap=args.radius_cap,
        pgd_step=args.pgd_step,
        pgd_max_steps=args.pgd_steps,
        binsearch_bits=args.binsearch_bits,
        grid_resolution=args.grid_resolution,
    )
    return quality.LocalProvider(model, args.oracle, cfg), model


def _resolve(path) -> Path:
    return Path(path).expanduser().resolve()


def _require_seed(args):
    if args.seed is None:
        raise UsageError("--seed is required (no time-based default)")


# -- subcommands -------------------------------------------------------------


def cmd_sample_size(args) -> int:
    s = bounds.solve_sample_size(args.epsilon, args.delta, args.d)
    print(s)
    print(f"residual(s)   = {bounds.sample_size_residual(s, args.epsilon, args.delta, args.d):.6g}")
    print(f"residual(s-1) = {bounds.sample_size_residual(s - 1, args.epsilon, args.delta, args.d):.6g}")
    return EXIT_OK


def cmd_quantile_index(args) -> int:
    print(bounds.quantile_index(args.s, args.p, args.delta))
    return EXIT_OK


def cmd_certify(args) -> int:
    _require_seed(args)
    data_path, out = _resolve(args.data), _resolve(args.out)
    sample_out = _resolve(args.sample_out) if args.sample_out else out.with_suffix(".sample.csv")
    params = CertificateParams(args.epsilon, args.delta, args.p_min, args.d)
    provider, _ = _provider(args)
    X, _ = quality.load_dataset(data_path)

    required = bounds.solve_sample_size(params.epsilon, params.delta / 2, params.vc_dim)
    s = args.sample_size or required
    if s < required:
        log.warning("sample size %d below the required %d", s, required)
    index = bounds.quantile_index(s, 1.0 - params.p_min, params.delta / 2)
    log.info("drawing %d quality points", s)
    sample = quality.build_quality_sample(
        X,
        provider,
        s,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        workers=max(1, args.workers),
        out_path=sample_out,
        resume=args.resume,
    )
    kappa_max = certifier.compute_kappa_max(sample, params, index)
    rmap = certifier.build_map(sample, kappa_max, args.rho_quantum)
    oracle_config = getattr(provider, "cfg", None)
    cert = certifier.emit_certificate(
        sample,
        params,
        rmap,
        oracle_kind=sample.provenance.get("oracle_kind", provider.kind),
        shift_lambda=args.shift_lambda,
        oracle_config=oracle_config.to_dict() if oracle_config is not None else {},
        provenance=sample.provenance,
    )
    cert.save(out)
    print(f"map size: {rmap.size}")
    print(f"kappa_max: {kappa_max!r}")
    print(f"bound: {cert.bound!r}")
    if cert.shift_bound is not None:
        print(f"shift bound: {cert.shift_bound!r}")
    print(f"certificate: {out}")
    print(f"sample: {sample_out}")

    if args.query_rho is not None:
        verdict = certifier.certify(sample, params, args.query_rho, args.query_kappa, kappa_max)
        print(f"query (rho={args.query_rho}, kappa={args.query_kappa}): {verdict.status}")
        if verdict.note:
            print(f"  {verdict.note}")
        if not verdict.certified:
            return EXIT_NEGATIVE
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cert = certifier.PagCertificate.load(_resolve(args.certificate))
    provider, model = _provider(args)
    X, _ = quality.load_dataset(_resolve(args.data))
    out = _resolve(args.out)

    expected = cert.provenance.get("provider", {}).get("model_hash")
    if model is not None and expected is not None and model.hash() != expected:
        if not args.allow_hash_mismatch:
            raise UsageError(f"model hash {model.hash()} does not match certificate {expected}")
        print(
            f"WARNING: model hash {model.hash()} differs from the certified model {expected}; "
            "the certificate does not cover this model",
            file=sys.stderr,
        )

    test = quality.evaluate_points(provider, X, max(1, args.workers))
    report = evaluation.evaluate_on_test(cert.map, test, cert.params)
    report.write_json(out)
    report.write_csv(out.with_suffix(".per_kappa.csv"))
    np.savetxt(
        out.with_suffix(".scatter.csv"),
        np.column_stack([test.rho, test.kappa]),
        delimiter=",",
        header="rho,kappa",
        comments="",
        fmt="%.17g",
    )
    print(f"p_hat: {report.p_hat!r}  (good if <= {report.bound!r})")
    print(f"n_c: {report.n_c}  (good if <= {report.n_c_limit!r})")
    print(f"n_c/|M|: {report.n_c / max(report.map_size, 1):.6g}")
    print(f"good run: {'yes' if report.good_run else 'no'}")
    return EXIT_OK if report.good_run else EXIT_NEGATIVE


def cmd_montecarlo(args) -> int:
    _require_seed(args)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.law == "quantile":
        if args.s is None or args.p is None:
            raise UsageError("quantile law needs --s and --p")
        dist = evaluation.Uniform01() if args.dist == "uniform" else evaluation.PointMass(args.atom)
        check = evaluation.monte_carlo_quantile_check(dist, args.s, args.p, args.delta, args.trials, args.seed, args.workers)
    else:
        if args.epsilon is None:
            raise UsageError("epsnet law needs --epsilon")
        params = CertificateParams(args.epsilon, args.delta, 0.25, args.d)
        check = evaluation.monte_carlo_epsnet_check(
            SyntheticLinearWorld(), params, args.trials, args.seed, workers=args.workers
        )
    limit = args.delta + 3 * check.standard_error
    print(f"sample size: {check.sample_size}")
    print(f"failures: {check.failures}/{check.trials}")
    print(f"failure rate: {check.failure_rate:.6g}")
    print(f"99% upper bound: {check.upper_99:.6g}")
    ok = check.failure_rate <= limit
    print(f"rate <= delta + 3 se ({limit:.6g}): {'yes' if ok else 'no'}")
    return EXIT_OK if ok else EXIT_NEGATIVE


def cmd_synth_world(args) -> int:
    _require_seed(args)
    out = _resolve(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = synthetic_linear_world(args.seed, args.n)
    quality.save_dataset(out / "data.csv", setup.X, setup.labels)
    test_X = setup.world.sample_inputs(args.test_n, np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(1,))))
    quality.save_dataset(out / "test.csv", test_X, setup.world.labels(test_X))
    save_model(setup.model, out / "model.json")
    print(out / "data.csv")
    print(out / "test.csv")
    print(out / "model.json")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pagcert", description="PAG robustness certification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-size", help="smallest sample forming an epsilon-net")
    _add_params(p, with_pmin=False)
    p.set_defaults(func=cmd_sample_size)

    p = sub.add_parser("quantile-index", help="order-statistic index for a quantile bound")
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.set_defaults(func=cmd_quantile_index)

    p = sub.add_parser("certify", help="sample, build the map, emit a certificate")
    _add_params(p)
    _add_oracle(p)
    p.add_argument("--data", required=True, help="dataset CSV (feature_* columns)")
    p.add_argument("--out", required=True, help="certificate JSON path")
    p.add_argument("--sample-out", help="quality-sample CSV (default: next to the certificate)")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-sigma", type=float, default=quality.DEFAULT_NOISE_SIGMA)
    p.add_argument("--sample-size", type=int, help="override the required sample size")
    p.add_argument("--rho-quantum", type=float)
    p.add_argument("--shift-lambda", type=float)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--query-rho", type=float)
    p.add_argument("--query-kappa", type=float)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("evaluate", help="check a certificate on a test set")
    _add_oracle(p)
    p.add_argument("--certificate", required=True)
    p.add_argument("--data", required=True, help="test dataset CSV")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--allow-hash-mismatch", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("montecarlo", help="Monte-Carlo check of a sampling law")
    p.add_argument("--law", choices=("epsnet", "quantile"), required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--d", type=int, default=bounds.QUALITY_VC_DIM)
    p.add_argument("--s", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--dist", choices=("uniform", "point"), default="uniform")
    p.add_argument("--atom", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("synth-world", help="write the synthetic dataset and model")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--test-n", type=int, default=10000)
    p.set_defaults(func=cmd_synth_world)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except OracleError as exc:
        where = f" (request {exc.request_id})" if exc.request_id is not None else ""
        print(f"oracle failure{where}: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (UsageError, PagError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
