"""Configuration-driven experiment runner.

Every validation and sweep is a subcommand writing CSV (RFC 4180, header
row) plus a JSON sidecar holding the full configuration and seeds, so any
run is reproducible byte-for-byte from its sidecar.

Exit codes: 0 success, 1 tolerance failure, 2 configuration error,
64 perturbative-validity flags present (soft).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import ConfigError, OutsidePerturbativeRegime
from .features import ShapeParams, build_hat_dataset
from .network import NetworkConfig, RawDataset, mc_prior_stats
from .graphproc import estimate_moment
from .oracles import wick_mc
from .partition import (PerturbationTooLarge, build_posterior_geometry,
                        eval_integrals, log_evidence, posterior_cumulants,
                        zero_temp_evidence)
from .powerlaw import (PowerLawSpec, benign_overfit_report, generate_powerlaw,
                       regime_log_evidence)
from .selfloops import (g1 as selfloop_g1, g2 as selfloop_g2,
                        prior_laplace_firstorder, selfloop_expectations, selfloop_mc)
from .seeding import module_rng

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_FLAGGED = 64


@dataclass
class ExperimentConfig:
    """Sectioned key-value configuration; round-trips losslessly as text."""

    sections: dict = field(default_factory=dict)

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read_string(text)
        return cls({s: dict(parser.items(s)) for s in parser.sections()})

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_text(self):
        out = io.StringIO()
        for section in self.sections:
            out.write(f"[{section}]\n")
            for key, value in self.sections[section].items():
                out.write(f"{key} = {value}\n")
            out.write("\n")
        return out.getvalue()

    def merged(self, defaults):
        merged = {s: dict(kv) for s, kv in defaults.items()}
        for s, kv in self.sections.items():
            merged.setdefault(s, {}).update(kv)
        return ExperimentConfig(merged)

    def apply_overrides(self, overrides):
        for item in overrides:
            try:
                key, value = item.split("=", 1)
                section, name = key.split(".", 1)
            except ValueError as exc:
                raise ConfigError(f"override {item!r} is not section.key=value") from exc
            self.sections.setdefault(section, {})[name] = value

    def get(self, section, key, cast=str):
        try:
            raw = self.sections[section][key]
        except KeyError as exc:
            raise ConfigError(f"missing config entry [{section}] {key}") from exc
        try:
            if cast is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"cannot parse [{section}] {key} = {raw!r}") from exc

    def get_list(self, section, key, cast=float):
        return [cast(tok) for tok in self.get(section, key).split()]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def _write_sidecar(path, command, config, seed, outputs, summary):
    doc = {
        "schema_version": 1,
        "tool": f"shapedmlp {__version__}",
        "command": command,
        "seed": seed,
        "config": config.sections,
        "outputs": outputs,
        "summary": summary,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parallel_map(fn, items, threads):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _toy_raw(n0, p, seed, with_test=True):
    """Bundled deterministic toy data: unit-ish norms, well-conditioned."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(99,)))
    x = rng.standard_normal((n0, p))
    x *= rng.uniform(0.5, 0.9, size=p) * np.sqrt(n0) / np.linalg.norm(x, axis=0)
    y = rng.standard_normal(p)
    y /= max(1.0, np.max(np.abs(y)))
    x_test = None
    if with_test:
        x_test = rng.standard_normal(n0)
        x_test *= 0.7 * np.sqrt(n0) / np.linalg.norm(x_test)
    return RawDataset(x, y, x_test)


# ---------------------------------------------------------------------------
# subcommand defaults and implementations


DEFAULTS = {
    "validate-prior": {
        "shape": {"psis": "0 0.3", "etas": "0 0.3"},
        "network": {"width": "120", "depth": "12", "n0": "8", "p": "3"},
        "run": {"n_samples": "4000", "tau": "0.5", "band_c": "5.0"},
    },
    "validate-selfloop": {
        "shape": {"psis": "-0.4 0.2 0.35", "etas": "-0.5 0.25 0.45"},
        "run": {"norm_ratios": "0.2 0.4", "depth": "200", "n_samples": "150000",
                "taus": "0.25 0.5 0.75", "band_c": "1.0"},
    },
    "validate-graph": {
        "shape": {"psis": "0 0.3", "etas": "0 0.3"},
        "network": {"width": "200", "depth": "12", "n0": "8", "p": "3"},
        "run": {"n_graph": "4000", "n_net": "8000", "band_c": "5.0"},
    },
    "validate-wick": {
        "run": {"n_instances": "4", "n_samples": "50000", "p": "3", "n0": "4",
                "betas": "1 10 1e12", "psis": "0 0.3 -0.3", "etas": "0 0.4"},
    },
    "evidence": {
        "data": {"kind": "toy", "n0": "12", "p": "4"},
        "shape": {"psi": "0.0", "eta": "0.0"},
        "model": {"depth": "4", "width": "400", "beta": "inf"},
    },
    "posterior": {
        "data": {"kind": "toy", "n0": "12", "p": "4"},
        "shape": {"psi": "0.2", "eta": "0.1"},
        "model": {"depth": "4", "width": "400", "beta": "8.0"},
        "run": {"n_test": "5", "test_scale": "0.7"},
    },
    "powerlaw-sweep": {
        "data": {"p": "64", "n0": "128", "alpha": "1.5", "k": "2",
                 "sigma_eps2_scale": "0.5"},
        "shape": {"psi": "0.0", "eta": "0.0"},
        "grid": {"ln": "0 0.005 0.01", "b_exponents": "0.5 1.0 1.5 2.0 2.5"},
        "run": {"n_test": "50"},
    },
    "phase-diagram": {
        "data": {"p": "256", "alpha": "1.5", "c": "0.5"},
        "grid": {"gammas": "0.05 0.15 0.25 0.35 0.45",
                 "deltas": "0.6 1.0 1.4 1.8 2.2 2.6"},
        "model": {"ln": "0.01"},
    },
}


def _cmd_validate_prior(cfg, seed, out_dir, threads, tol_scale):
    psis = cfg.get_list("shape", "psis")
    etas = cfg.get_list("shape", "etas")
    width = cfg.get("network", "width", int)
    depth = cfg.get("network", "depth", int)
    n0 = cfg.get("network", "n0", int)
    p = cfg.get("network", "p", int)
    n_samples = cfg.get("run", "n_samples", int)
    tau = cfg.get("run", "tau", float)
    band_c = cfg.get("run", "band_c", float)
    raw = _toy_raw(n0, p, seed)
    rng = module_rng(seed, "prior-t")
    t = rng.standard_normal(p) * 0.7
    band = band_c * (depth / width**2 + 1.0 / depth)
    rows = []
    n_fail = 0
    for psi in psis:
        for eta in etas:
            shape = ShapeParams(psi, eta)
            hat = build_hat_dataset(raw, shape)
            stats = selfloop_expectations(hat, shape)
            closed = prior_laplace_firstorder(hat, stats, t, tau, depth, width)
            config = NetworkConfig.equal_widths(n0, width, depth, psi, eta, seed=seed)
            mc = mc_prior_stats(config, raw.X, t, tau=tau, x_test=raw.x_test,
                                n_samples=n_samples, seed=seed)
            est, se = mc.laplace
            ok = abs(est - closed) <= tol_scale * (3.0 * se + band)
            n_fail += not ok
            rows.append([psi, eta, tau, closed, est, se, ok])
    return ["psi", "eta", "tau", "closed_form", "mc", "se", "pass"], rows, n_fail, False


def _cmd_validate_selfloop(cfg, seed, out_dir, threads, tol_scale):
    psis = cfg.get_list("shape", "psis")
    etas = cfg.get_list("shape", "etas")
    ratios = cfg.get_list("run", "norm_ratios")
    depth = cfg.get("run", "depth", int)
    n_samples = cfg.get("run", "n_samples", int)
    taus = tuple(cfg.get_list("run", "taus"))
    band = cfg.get("run", "band_c", float) / cfg.get("run", "depth", int)
    rows = []
    n_fail = 0
    for psi in psis:
        for eta in etas:
            shape = ShapeParams(psi, eta)
            for ratio in ratios:
                mc = selfloop_mc(shape, ratio, depth, n_samples, seed=seed, taus=taus)
                ph = shape.psi_hat_mu(ratio)
                e = np.exp(-abs(psi))
                closed = {
                    "t00": e * (1 - 2 * ph) ** -0.5,
                    "t11b": shape.psi_hat * e * (1 - 2 * ph) ** -1.5 * selfloop_g1(eta),
                    "t20": ph * e * (1 - 2 * ph) ** -2.5
                           * ((1 + ph) * selfloop_g1(eta) - 3 * ph * selfloop_g2(eta)),
                }
                for name, want in closed.items():
                    est, se = mc[name]
                    ok = abs(est - want) <= tol_scale * (3.0 * se + band)
                    n_fail += not ok
                    rows.append([psi, eta, ratio, name, want, est, se, ok])
    return (["psi", "eta", "norm_ratio", "quantity", "closed_form", "mc", "se", "pass"],
            rows, n_fail, False)


def _cmd_validate_graph(cfg, seed, out_dir, threads, tol_scale):
    psis = cfg.get_list("shape", "psis")
    etas = cfg.get_list("shape", "etas")
    width = cfg.get("network", "width", int)
    depth = cfg.get("network", "depth", int)
    n0 = cfg.get("network", "n0", int)
    p = cfg.get("network", "p", int)
    n_graph = cfg.get("run", "n_graph", int)
    n_net = cfg.get("run", "n_net", int)
    band_c = cfg.get("run", "band_c", float)
    raw = _toy_raw(n0, p, seed, with_test=False)
    overlap = raw.X.T @ raw.X / n0
    band = band_c * (depth / width**2 + 1.0 / depth)
    cases = [((0,), (1,)), ((0,), (0,)), ((0, 1), (1, 2))]
    rows = []
    n_fail = 0
    for psi in psis:
        for eta in etas:
            config = NetworkConfig.equal_widths(n0, width, depth, psi, eta, seed=seed)
            pairs = [tuple(zip(mb, nb)) for mb, nb in cases]
            net = mc_prior_stats(config, raw.X, np.zeros(p), n_samples=n_net, seed=seed,
                                 index_pairs=pairs[0] + pairs[1],
                                 pair_products=tuple(pairs))
            for (mubar, nubar), prod in zip(cases, pairs):
                g_est, g_se = estimate_moment(mubar, nubar, overlap, config,
                                              n_samples=n_graph, seed=seed)
                n_est, n_se = net.overlap_products[prod]
                tol = tol_scale * (3.0 * np.hypot(g_se, n_se) + band)
                ok = abs(g_est - n_est) <= tol
                n_fail += not ok
                rows.append([psi, eta, len(mubar), f"{mubar}x{nubar}",
                             g_est, g_se, n_est, n_se, ok])
    return (["psi", "eta", "q", "indices", "graph", "graph_se", "network",
             "network_se", "pass"], rows, n_fail, False)


def _cmd_validate_wick(cfg, seed, out_dir, threads, tol_scale):
    n_instances = cfg.get("run", "n_instances", int)
    n_samples = cfg.get("run", "n_samples", int)
    p = cfg.get("run", "p", int)
    n0 = cfg.get("run", "n0", int)
    betas = cfg.get_list("run", "betas")
    psis = cfg.get_list("run", "psis")
    etas = cfg.get_list("run", "etas")
    rng = module_rng(seed, "wick")
    jobs = []
    for inst in range(n_instances):
        psi = psis[inst % len(psis)]
        eta = etas[inst % len(etas)]
        beta = betas[inst % len(betas)]
        raw = _toy_raw(n0, p, seed + inst)
        jobs.append((inst, psi, eta, beta, raw))

    def run(job):
        inst, psi, eta, beta, raw = job
        shape = ShapeParams(psi, eta)
        hat = build_hat_dataset(raw, shape)
        stats = selfloop_expectations(hat, shape)
        geom = build_posterior_geometry(hat, beta)
        from .partition import attach_test_point
        geom = attach_test_point(geom, hat.xhat_test)
        table = eval_integrals(geom, stats.Mhat_diag, stats.mhat_test)
        mc = wick_mc(geom, stats.Mhat_diag, stats.mhat_test,
                     n_samples=n_samples, seed=seed + 1000 + inst)
        out = []
        for key, (est, se) in sorted(mc.items()):
            closed = table[key]
            ok = abs(est - closed) <= tol_scale * 3.0 * max(se, 1e-12)
            out.append([inst, psi, eta, beta, key[0], key[1], closed, est, se, ok])
        return out

    rows = []
    n_fail = 0
    for chunk in _parallel_map(run, jobs, threads):
        for row in chunk:
            n_fail += not row[-1]
            rows.append(row)
    return (["instance", "psi", "eta", "beta", "integral", "tau_power",
             "closed_form", "mc", "se", "pass"], rows, n_fail, False)


def _cmd_evidence(cfg, seed, out_dir, threads, tol_scale):
    shape = ShapeParams(cfg.get("shape", "psi", float), cfg.get("shape", "eta", float))
    depth = cfg.get("model", "depth", int)
    width = cfg.get("model", "width", float)
    beta = cfg.get("model", "beta", float)
    raw = _toy_raw(cfg.get("data", "n0", int), cfg.get("data", "p", int), seed)
    hat = build_hat_dataset(raw, shape)
    flagged = False
    if np.isinf(beta):
        rep = zero_temp_evidence(hat, depth, width, shape)
    else:
        rep = log_evidence(hat, depth, width, shape, beta=beta)
    flagged = rep.perturbation_flag
    rows = [[rep.beta, rep.depth_ratio, rep.kernel_term, rep.linear_term,
             rep.nonlinear_term, rep.log_Z0, rep.perturbation_flag]]
    extra = json.loads(rep.to_json())
    return (["beta", "depth_ratio", "kernel", "linear", "nonlinear", "log_Z0",
             "flagged"], rows, 0, flagged, extra)


def _cmd_posterior(cfg, seed, out_dir, threads, tol_scale):
    shape = ShapeParams(cfg.get("shape", "psi", float), cfg.get("shape", "eta", float))
    depth = cfg.get("model", "depth", int)
    width = cfg.get("model", "width", float)
    beta = cfg.get("model", "beta", float)
    n_test = cfg.get("run", "n_test", int)
    scale = cfg.get("run", "test_scale", float)
    n0 = cfg.get("data", "n0", int)
    raw = _toy_raw(n0, cfg.get("data", "p", int), seed, with_test=False)
    hat = build_hat_dataset(raw, shape)
    rng = module_rng(seed, "posterior-tests")
    rows = []
    flagged = False
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PerturbationTooLarge)
        for i in range(n_test):
            x = rng.standard_normal(n0)
            x *= scale * np.sqrt(n0) / np.linalg.norm(x)
            from .features import embed
            summ = posterior_cumulants(hat, depth, width, shape, beta=beta,
                                       xhat_test=embed(x, shape))
            flagged |= summ.perturbation_flag
            rows.append([i, summ.mean, summ.variance, summ.mean_zeroth,
                         summ.mean_correction, summ.variance_zeroth,
                         summ.variance_correction, summ.third_cumulant,
                         summ.fourth_cumulant, summ.perturbation_flag])
    return (["point", "mean", "variance", "mean_zeroth", "mean_correction",
             "variance_zeroth", "variance_correction", "third_cumulant",
             "fourth_cumulant", "flagged"], rows, 0, flagged)


def _cmd_powerlaw_sweep(cfg, seed, out_dir, threads, tol_scale):
    p = cfg.get("data", "p", int)
    alpha = cfg.get("data", "alpha", float)
    spec = PowerLawSpec(
        p=p, n0=cfg.get("data", "n0", int), alpha=alpha,
        k=cfg.get("data", "k", int),
        sigma_eps2=cfg.get("data", "sigma_eps2_scale", float) * p ** (1.0 - alpha),
        seed=seed)
    shape = ShapeParams(cfg.get("shape", "psi", float), cfg.get("shape", "eta", float))
    ln_grid = cfg.get_list("grid", "ln")
    b_grid = [p**e for e in cfg.get_list("grid", "b_exponents")]
    n_test = cfg.get("run", "n_test", int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PerturbationTooLarge)
        cells = benign_overfit_report(spec, ln_grid, b_grid, shape,
                                      n_test=n_test, seed=seed)
    header = list(cells[0].keys())
    rows = [[cell[k] for k in header] for cell in cells]
    flagged = any(cell["flagged"] for cell in cells)
    return header, rows, 0, flagged


def _cmd_phase_diagram(cfg, seed, out_dir, threads, tol_scale):
    p = cfg.get("data", "p", int)
    alpha = cfg.get("data", "alpha", float)
    c = cfg.get("data", "c", float)
    ln = cfg.get("model", "ln", float)
    gammas = cfg.get_list("grid", "gammas")
    deltas = cfg.get_list("grid", "deltas")
    rows = []
    for gamma in gammas:
        for delta in deltas:
            k = max(1, int(round(p**gamma)))
            spec = PowerLawSpec(p=p, n0=2 * p, alpha=alpha, k=k, seed=seed)
            b = p**delta
            try:
                rep = regime_log_evidence(spec, b, ln, c=c)
                rows.append([gamma, delta, k, b, rep.regime, rep.value,
                             rep.depth_term, rep.k_ratio, rep.b_ratio])
            except OutsidePerturbativeRegime as exc:
                rows.append([gamma, delta, k, b, f"excluded ({exc})",
                             None, None, None, None])
    return (["gamma", "delta", "k", "B", "regime", "log_evidence",
             "depth_term", "k_ratio", "b_ratio"], rows, 0, False)


COMMANDS = {
    "validate-prior": _cmd_validate_prior,
    "validate-selfloop": _cmd_validate_selfloop,
    "validate-graph": _cmd_validate_graph,
    "validate-wick": _cmd_validate_wick,
    "evidence": _cmd_evidence,
    "posterior": _cmd_posterior,
    "powerlaw-sweep": _cmd_powerlaw_sweep,
    "phase-diagram": _cmd_phase_diagram,
}

def main(argv=None):
    parser = argparse.ArgumentParser(prog="shapedmlp", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration entry")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default=".")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--tolerance-scale", type=float, default=1.0,
                        help="multiplies every SE threshold (smoke runs)")
    args = parser.parse_args(argv)

    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        cfg = cfg.merged(DEFAULTS.get(args.command, {}))
        cfg.apply_overrides(args.set)
        import os
        os.makedirs(args.out_dir, exist_ok=True)
        result = COMMANDS[args.command](cfg, args.seed, args.out_dir,
                                        args.threads, args.tolerance_scale)
    except (ConfigError, configparser.Error, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    header, rows, n_fail, flagged = result[:4]
    extra = result[4] if len(result) > 4 else None
    import os
    csv_path = os.path.join(args.out_dir, f"{args.command}.csv")
    json_path = os.path.join(args.out_dir, f"{args.command}.json")
    _write_csv(csv_path, header, rows)
    summary = {"rows": len(rows), "failures": n_fail, "flagged": bool(flagged)}
    if extra:
        summary["report"] = extra
    _write_sidecar(json_path, args.command, cfg, args.seed,
                   {"csv": os.path.basename(csv_path)}, summary)
    print(f"{args.command}: {len(rows)} rows, {n_fail} failures"
          + (", perturbative flags present" if flagged else ""))
    if n_fail:
        return EXIT_FAIL
    if flagged:
        return EXIT_FLAGGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
