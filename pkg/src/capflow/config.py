"""Scenario configuration: JSON in, validated model + run plan out.

Unknown keys are rejected with their JSON pointer path.  The full schema is
documented in docs/scenario_schema.md.
"""

import json

import numpy as np

from .model import (EconomyParams, Model, ModelError, ParamFunctions, Profile,
                    SectorGrid)


class ConfigError(ValueError):
    pass


_PROFILE_KEYS = {"kind", "value", "amplitude", "cycles", "phase", "table"}

_SCHEMA = {
    "name": None,
    "grid": {"n_points", "length", "boundary"},
    "params": {"tau", "gamma", "epsilon", "nu", "sigma_x", "sigma_k",
               "sigma_xhat", "sigma_khat", "n_firms", "n_investors",
               "alpha_lifespan", "varsigma"},
    "functions": {"r_profile", "b_productivity", "cobb_alpha", "h_exponent",
                  "f0_scale", "f1_scale", "f1_shape", "f2_shape", "f2_coef",
                  "f2_scale"},
    "background": {"k_init", "use_backreaction", "damping", "max_sweeps",
                   "tol", "mode"},
    "capital": {"coupling", "scan_lo", "scan_hi", "scan_points"},
    "dynamics": {"a0", "a", "b", "c", "d", "e", "f_diff", "g_diff", "h_diff",
                 "u", "v", "g_wavenumbers"},
    "transitions": {"queries"},
    "abm": {"n_steps", "dt", "burn_in_fraction", "record_every", "replicas",
            "k_init", "n_batches", "z_max", "rel_max", "pass_fraction"},
    "stages": None,
    "sweep": {"path", "values"},
    "seeds": None,
}

_QUERY_KEYS = {"kind", "start", "end", "second_start", "second_end", "alpha",
               "id"}

STAGES = ("background", "capital", "dynamics", "transitions", "abm")


def _reject_unknown(block, allowed, pointer):
    if not isinstance(block, dict):
        raise ConfigError(f"{pointer}: expected an object")
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{pointer}/{key}: unknown key")


def _profile(block, pointer):
    if block is None:
        return Profile("flat", 1.0)
    _reject_unknown(block, _PROFILE_KEYS, pointer)
    kind = block.get("kind", "flat")
    return Profile(kind=kind,
                   value=float(block.get("value", 1.0)),
                   amplitude=float(block.get("amplitude", 0.0)),
                   cycles=float(block.get("cycles", 1.0)),
                   phase=float(block.get("phase", 0.0)),
                   table=tuple(block.get("table", ())))


class Scenario:
    def __init__(self, raw):
        _reject_unknown(raw, set(_SCHEMA), "")
        for key, allowed in _SCHEMA.items():
            if allowed is not None and key in raw:
                if key == "transitions":
                    _reject_unknown(raw[key], allowed, f"/{key}")
                    for i, q in enumerate(raw[key].get("queries", [])):
                        _reject_unknown(q, _QUERY_KEYS,
                                        f"/transitions/queries/{i}")
                else:
                    _reject_unknown(raw[key], allowed, f"/{key}")
        self.raw = raw
        self.name = raw.get("name", "scenario")

        g = raw.get("grid", {})
        try:
            self.grid = SectorGrid.uniform(
                n_points=int(g.get("n_points", 16)),
                length=float(g.get("length", 1.0)),
                boundary=g.get("boundary", "periodic"))
        except ModelError as exc:
            raise ConfigError(f"/grid: {exc}") from exc

        p = raw.get("params", {})
        try:
            self.params = EconomyParams(
                tau=float(p.get("tau", 1.0)),
                gamma_c=float(p.get("gamma", 0.0025)),
                epsilon=float(p.get("epsilon", 0.1)),
                nu=float(p.get("nu", 0.0)),
                sigma_X=float(p.get("sigma_x", 0.05)),
                sigma_K=float(p.get("sigma_k", 0.02)),
                sigma_Xhat=float(p.get("sigma_xhat", 0.05)),
                sigma_Khat=float(p.get("sigma_khat", 3.86)),
                n_firms=float(p.get("n_firms", 200.0)),
                n_investors=float(p.get("n_investors", 400.0)),
                alpha_lifespan=float(p.get("alpha_lifespan", 1.0)),
                varsigma=float(p.get("varsigma", 1.0)))
        except ModelError as exc:
            raise ConfigError(f"/params: {exc}") from exc

        f = raw.get("functions", {})
        try:
            self.funcs = ParamFunctions(
                r_profile=_profile(f.get("r_profile"), "/functions/r_profile"),
                b_productivity=_profile(f.get("b_productivity"),
                                        "/functions/b_productivity"),
                cobb_alpha=float(f.get("cobb_alpha", 0.5)),
                h_exponent=float(f.get("h_exponent", 0.5)),
                f0_scale=float(f.get("f0_scale", 0.02)),
                f1_scale=float(f.get("f1_scale", 0.1)),
                f1_shape=f.get("f1_shape", "arctan"),
                f2_shape=f.get("f2_shape", "concave"),
                f2_coef=float(f.get("f2_coef", 0.5)),
                f2_scale=float(f.get("f2_scale", 1.0)))
        except ModelError as exc:
            raise ConfigError(f"/functions: {exc}") from exc

        self.background = dict(
            k_init=float(raw.get("background", {}).get("k_init", 2.0)),
            use_backreaction=bool(raw.get("background", {})
                                  .get("use_backreaction", False)),
            damping=float(raw.get("background", {}).get("damping", 0.5)),
            max_sweeps=int(raw.get("background", {}).get("max_sweeps", 200)),
            tol=float(raw.get("background", {}).get("tol", 1e-6)),
            mode=raw.get("background", {}).get("mode", "root"))
        if self.background["mode"] not in ("root", "picard"):
            raise ConfigError("/background/mode: must be 'root' or 'picard'")

        cap = raw.get("capital", {})
        self.capital = dict(
            coupling=cap.get("coupling", "tau_plain"),
            scan_lo=float(cap.get("scan_lo", 1e-4)),
            scan_hi=float(cap.get("scan_hi", 1e6)),
            scan_points=int(cap.get("scan_points", 400)))
        if self.capital["coupling"] not in ("tau_plain", "tau_ratio"):
            raise ConfigError("/capital/coupling: must be tau_plain or tau_ratio")

        dyn = dict(raw.get("dynamics", {}))
        self.g_wavenumbers = [float(x) for x in
                              dyn.pop("g_wavenumbers", [0.0, 1.0, 4.0])]
        self.expectation = {k: float(v) for k, v in dyn.items()}

        self.transition_queries = raw.get("transitions", {}).get("queries", [])

        a = raw.get("abm", {})
        self.abm = dict(
            n_steps=int(a.get("n_steps", 100000)),
            dt=float(a.get("dt", self.params.epsilon / 10.0)),
            burn_in_fraction=float(a.get("burn_in_fraction", 0.5)),
            record_every=int(a.get("record_every", 100)),
            replicas=int(a.get("replicas", 1)),
            k_init=a.get("k_init"),
            n_batches=int(a.get("n_batches", 20)),
            z_max=float(a.get("z_max", 3.0)),
            rel_max=float(a.get("rel_max", 0.10)),
            pass_fraction=float(a.get("pass_fraction", 1.0)))

        self.stages = raw.get("stages", list(STAGES))
        if not self.stages:
            raise ConfigError("/stages: must be non-empty")
        for s in self.stages:
            if s not in STAGES:
                raise ConfigError(f"/stages: unknown stage {s!r}")

        self.sweep = raw.get("sweep")
        if self.sweep is not None:
            values = self.sweep.get("values", [])
            if not all(np.isfinite(v) for v in values):
                raise ConfigError("/sweep/values: all values must be finite")
            if "path" not in self.sweep:
                raise ConfigError("/sweep: needs a 'path'")

        self.seeds = [int(s) for s in raw.get("seeds", [0])]

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls(raw)

    def model(self):
        return Model(self.grid, self.params, self.funcs)

    def with_override(self, path, value):
        """New scenario with raw[path...] replaced (sweep support)."""
        raw = json.loads(json.dumps(self.raw))
        keys = path.split(".")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
        return Scenario(raw)
