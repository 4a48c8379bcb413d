"""Panel-data container, design-matrix construction, validation, and
CSV ingestion/emission.

The long-format data CSV has one row per (patient, window) with header

    patient_id, window, time, visit, m_1..m_R, y_1..y_R, w_1..w_{s-1}, u_1..u_{e-1}

``visit`` and ``m_*`` are 0/1 flags; an empty cell means missing.  Response
flags and outcome values may only be present where ``visit`` is 1, and an
outcome value may only be present where its response flag is 1.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

__all__ = [
    "PanelData",
    "TruthBlock",
    "ModelSpec",
    "Priors",
    "DesignSet",
    "PanelValidationError",
    "load_panel_csv",
    "save_panel_csv",
    "build_designs",
    "naive_filter",
    "load_config",
]

METHODS = ("full", "naive", "mar", "mnar")


class PanelValidationError(ValueError):
    pass


@dataclass(frozen=True)
class TruthBlock:
    """Ground truth carried alongside simulated data for scoring."""

    classes: np.ndarray          # (n,) 1-based true class labels
    y_full: np.ndarray           # (n, J, R) outcomes before masking
    params: dict                 # true parameter values, JSON-serializable
    marginal: dict | None = None  # true marginal intercepts/slopes per outcome

    def to_json(self):
        out = {
            "classes": self.classes.tolist(),
            "y_full": self.y_full.tolist(),
            "params": self.params,
            "marginal": self.marginal,
        }
        return out

    @classmethod
    def from_json(cls, obj):
        return cls(
            classes=np.asarray(obj["classes"], dtype=np.int64),
            y_full=np.asarray(obj["y_full"], dtype=float),
            params=obj["params"],
            marginal=obj.get("marginal"),
        )


@dataclass(frozen=True)
class PanelData:
    """Observed longitudinal panel.

    Arrays are immutable after construction; ``y`` is NaN wherever the
    flags say the value is unobserved.
    """

    t: np.ndarray                # (n, J) observation times
    d: np.ndarray                # (n, J) visit flags, 0/1
    m: np.ndarray                # (n, J, R) response flags, meaningful where d = 1
    y: np.ndarray                # (n, J, R) outcomes, NaN where unobserved
    w: np.ndarray                # (n, s) class-model covariates, first column 1
    u: np.ndarray                # (n, e) random-effect-mean covariates, first column 1
    patient_ids: np.ndarray = None
    truth: TruthBlock | None = None

    def __post_init__(self):
        for name in ("t", "d", "m", "y", "w", "u"):
            arr = np.asarray(getattr(self, name))
            object.__setattr__(self, name, arr)
        if self.patient_ids is None:
            object.__setattr__(self, "patient_ids", np.arange(1, self.n + 1))
        for name in ("t", "d", "m", "y", "w", "u", "patient_ids"):
            getattr(self, name).flags.writeable = False
        self.validate()

    @property
    def n(self):
        return self.t.shape[0]

    @property
    def J(self):
        return self.t.shape[1]

    @property
    def R(self):
        return self.y.shape[2]

    @property
    def n_visits(self):
        """Visits per patient, n_i."""
        return self.d.sum(axis=1)

    def validate(self):
        n, J = self.t.shape
        if self.d.shape != (n, J) or self.y.shape[:2] != (n, J) or self.m.shape != self.y.shape:
            raise PanelValidationError("inconsistent array shapes")
        if self.w.shape[0] != n or self.u.shape[0] != n:
            raise PanelValidationError("covariate rows do not match patient count")
        if n and (np.any(self.w[:, 0] != 1.0) or np.any(self.u[:, 0] != 1.0)):
            raise PanelValidationError("first covariate column must be the intercept 1")
        if not np.isin(self.d, (0, 1)).all() or not np.isin(self.m, (0, 1)).all():
            raise PanelValidationError("visit and response flags must be 0/1")
        if n and J > 1 and not np.all(np.diff(self.t, axis=1) > 0):
            raise PanelValidationError("times must be strictly increasing within patient")
        unvisited = self.d[:, :, None] == 0
        if np.any(self.m[unvisited[:, :, 0]] != 0):
            raise PanelValidationError("response flag present where visit = 0")
        observed = (self.d[:, :, None] == 1) & (self.m == 1)
        if np.any(np.isnan(self.y[observed])):
            raise PanelValidationError("missing outcome where flags say observed")
        if np.any(~np.isnan(self.y[~observed])):
            raise PanelValidationError("outcome value present where flags say missing")

    def with_truth(self, truth):
        return replace(self, truth=truth)

    def unmasked(self):
        """Fully observed copy built from the truth block (the full-data view)."""
        if self.truth is None:
            raise ValueError("no truth block: full-data view requires simulated data")
        n, J, R = self.y.shape
        return PanelData(
            t=self.t.copy(),
            d=np.ones((n, J), dtype=np.int8),
            m=np.ones((n, J, R), dtype=np.int8),
            y=self.truth.y_full.copy(),
            w=self.w.copy(),
            u=self.u.copy(),
            patient_ids=self.patient_ids.copy(),
            truth=self.truth,
        )


def panel_equal(a, b, rtol=1e-12):
    """Flag-exact, value-close equality of two panels (truth ignored)."""
    if (a.n, a.J, a.R) != (b.n, b.J, b.R):
        return False
    if not (np.array_equal(a.d, b.d) and np.array_equal(a.m, b.m)):
        return False
    obs = (a.d[:, :, None] == 1) & (a.m == 1)
    checks = [
        np.allclose(a.t, b.t, rtol=rtol),
        np.allclose(a.y[obs], b.y[obs], rtol=rtol),
        np.allclose(a.w, b.w, rtol=rtol),
        np.allclose(a.u, b.u, rtol=rtol),
    ]
    return all(checks)


@dataclass(frozen=True)
class ModelSpec:
    """Model dimensions and estimation method.

    ``degree`` is the polynomial degree of time shared by the outcome,
    visit, and response fixed effects; ``q`` random effects per outcome
    (intercept-only by default).  ``response_modeled`` flags the outcomes
    whose response process gets a submodel under the MNAR method.
    """

    K: int = 2
    R: int = 2
    J: int = 12
    degree: int = 1
    q: int = 1
    response_modeled: tuple = (False, True)
    method: str = "mnar"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if len(self.response_modeled) != self.R:
            raise ValueError("response_modeled must have one flag per outcome")
        object.__setattr__(self, "response_modeled", tuple(bool(v) for v in self.response_modeled))

    @property
    def p(self):
        return self.degree + 1

    @property
    def ph(self):
        return self.degree

    @property
    def models_visit(self):
        return self.method == "mnar"

    @property
    def modeled_outcomes(self):
        if self.method != "mnar":
            return ()
        return tuple(r for r, flag in enumerate(self.response_modeled) if flag)

    @property
    def imputes_responses(self):
        return self.method in ("mar", "mnar")


@dataclass(frozen=True)
class Priors:
    """Prior hyperparameters; all covariances PD, all IW df > dim - 1."""

    sigma_delta: np.ndarray
    sigma_beta: np.ndarray
    sigma_eta: np.ndarray
    mu_phi: np.ndarray
    sigma_phi: np.ndarray
    sigma_lambda: np.ndarray
    nu_sigma: float
    s_sigma: np.ndarray
    nu_psi: float
    s_psi: np.ndarray
    nu_omega: float
    s_omega: np.ndarray
    nu_theta: float
    s_theta: np.ndarray

    def __post_init__(self):
        for name in ("sigma_delta", "sigma_beta", "sigma_eta", "sigma_phi",
                     "sigma_lambda", "s_sigma", "s_psi", "s_omega", "s_theta"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, arr)
            np.linalg.cholesky(arr)  # PD check
        object.__setattr__(self, "mu_phi", np.atleast_1d(np.asarray(self.mu_phi, dtype=float)))
        for nu_name, s_name in (("nu_sigma", "s_sigma"), ("nu_psi", "s_psi"),
                                ("nu_omega", "s_omega"), ("nu_theta", "s_theta")):
            nu = float(getattr(self, nu_name))
            dim = getattr(self, s_name).shape[0]
            if nu <= dim - 1:
                raise ValueError(f"{nu_name} = {nu} must exceed {dim - 1}")

    @classmethod
    def defaults(cls, spec, s, e=1, coef_scale=100.0):
        """Diffuse defaults: MVN(0, 100 I) coefficient blocks, identity-scale
        inverse-Wishart covariances with means equal to their scale matrices."""
        return cls(
            sigma_delta=np.eye(s),
            sigma_beta=coef_scale * np.eye(spec.ph),
            sigma_eta=coef_scale * np.eye(e),
            mu_phi=np.zeros(spec.p),
            sigma_phi=coef_scale * np.eye(spec.p),
            sigma_lambda=coef_scale * np.eye(spec.p),
            nu_sigma=spec.R + 2.0,
            s_sigma=np.eye(spec.R),
            nu_psi=spec.q + 2.0,
            s_psi=np.eye(spec.q),
            nu_omega=spec.q + 2.0,
            s_omega=np.eye(spec.q),
            nu_theta=spec.q + 2.0,
            s_theta=np.eye(spec.q),
        )


@dataclass(frozen=True)
class DesignSet:
    """Per-patient design matrices on the standardized time scale.

    ``x = [1 | xh]`` column-wise; under hierarchical centering the random
    effect design ``z`` (intercept column) is disjoint from ``xh``.
    Restriction to visited windows is done downstream by masking rows
    with the visit flags.
    """

    x: np.ndarray   # (n, J, p)
    xh: np.ndarray  # (n, J, ph)
    z: np.ndarray   # (n, J, q)
    time_center: float
    time_scale: float


def standardize_times(t):
    """Zero-mean, unit-sd coding of the pooled time values."""
    if t.size == 0:
        return t, 0.0, 1.0
    center = float(np.mean(t))
    scale = float(np.std(t))
    if scale == 0.0:
        return t - center, center, 1.0
    return (t - center) / scale, center, scale


def build_designs(data, spec):
    """Polynomial-in-time fixed-effect designs plus the random-effect design.

    Time is standardized to zero mean and unit sd over the pooled windows,
    identically in the simulator and the fitter.
    """
    t = np.asarray(data.t, dtype=float)
    ts, center, scale = standardize_times(t)
    if spec.degree >= 1 and t.size and np.ptp(t) == 0.0:
        raise ValueError("constant time column with polynomial degree >= 1")
    powers = np.arange(spec.degree + 1)
    x = ts[:, :, None] ** powers[None, None, :]
    xh = x[:, :, 1:]
    if spec.q == 1:
        z = np.ones((data.n, data.J, 1))
    else:
        z = x[:, :, : spec.q].copy()
    return DesignSet(x=x, xh=xh, z=z, time_center=center, time_scale=scale)


def restrict_to_visits(mat, d_i):
    """Rows of a (J, ...) per-patient matrix at the visited windows."""
    return mat[np.asarray(d_i) == 1]


def naive_filter(data):
    """Keep only windows where every outcome is observed; drop patients
    left with no such window.  Returns (filtered PanelData, report dict)."""
    complete = (data.d == 1) & np.all(data.m == 1, axis=2)
    keep_patient = complete.any(axis=1)
    n_windows_dropped = int((data.d == 1).sum() - complete.sum())
    n_patients_dropped = int((~keep_patient).sum())

    d = np.where(complete, 1, 0).astype(np.int8)[keep_patient]
    m = np.repeat(d[:, :, None], data.R, axis=2)
    y = np.where(m == 1, np.where(np.isnan(data.y[keep_patient]), 0.0, data.y[keep_patient]), np.nan)
    truth = None
    if data.truth is not None:
        truth = TruthBlock(
            classes=data.truth.classes[keep_patient],
            y_full=data.truth.y_full[keep_patient],
            params=data.truth.params,
            marginal=data.truth.marginal,
        )
    filtered = PanelData(
        t=data.t[keep_patient],
        d=d,
        m=m,
        y=y,
        w=data.w[keep_patient],
        u=data.u[keep_patient],
        patient_ids=data.patient_ids[keep_patient],
        truth=truth,
    )
    report = {
        "patients_in": data.n,
        "patients_out": filtered.n,
        "patients_dropped": n_patients_dropped,
        "windows_dropped": n_windows_dropped,
        "empty_result": filtered.n == 0,
    }
    return filtered, report


def _covariate_columns(columns, prefix):
    pat = re.compile(rf"^{prefix}_(\d+)$")
    found = sorted((int(hit.group(1)), c) for c in columns if (hit := pat.match(c)))
    if [i for i, _ in found] != list(range(1, len(found) + 1)):
        raise PanelValidationError(f"{prefix}_* columns must be numbered 1..{len(found)}")
    return [c for _, c in found]


def load_panel_csv(path, spec=None):
    """Load and validate a long-format panel CSV.

    ``spec`` (optional) cross-checks R and J against the file contents.
    """
    df = pd.read_csv(path, dtype={"patient_id": str})
    required = {"patient_id", "window", "time", "visit"}
    missing = required - set(df.columns)
    if missing:
        raise PanelValidationError(f"missing required columns: {sorted(missing)}")
    m_cols = _covariate_columns(df.columns, "m")
    y_cols = _covariate_columns(df.columns, "y")
    w_cols = _covariate_columns(df.columns, "w")
    u_cols = _covariate_columns(df.columns, "u")
    if len(m_cols) != len(y_cols):
        raise PanelValidationError("m_* and y_* column counts differ")
    R = len(y_cols)
    if R == 0:
        raise PanelValidationError("no outcome columns found")
    if spec is not None and spec.R != R:
        raise PanelValidationError(f"file has R={R} outcomes, spec expects {spec.R}")

    ids = df["patient_id"].to_numpy()
    uniq, first_pos = np.unique(ids, return_index=True)
    uniq = uniq[np.argsort(first_pos)]  # preserve file order
    n = len(uniq)
    windows = df["window"].to_numpy()
    J = int(windows.max())
    if spec is not None and spec.J != J:
        raise PanelValidationError(f"file has J={J} windows, spec expects {spec.J}")
    if len(df) != n * J:
        raise PanelValidationError(
            f"non-rectangular patient blocks: {len(df)} rows != {n} patients x {J} windows")

    row_of = {pid: i for i, pid in enumerate(uniq)}
    i_idx = np.array([row_of[pid] for pid in ids])
    j_idx = windows.astype(int) - 1
    if np.any(j_idx < 0) or len(set(zip(i_idx, j_idx))) != n * J:
        raise PanelValidationError("windows must cover 1..J once per patient")

    t = np.full((n, J), np.nan)
    d = np.zeros((n, J), dtype=np.int8)
    m = np.zeros((n, J, R), dtype=np.int8)
    y = np.full((n, J, R), np.nan)
    t[i_idx, j_idx] = df["time"].to_numpy(dtype=float)
    visit = df["visit"].to_numpy(dtype=float)
    if np.any(np.isnan(visit)) or not np.isin(visit, (0.0, 1.0)).all():
        raise PanelValidationError("visit must be 0/1 and never empty")
    d[i_idx, j_idx] = visit.astype(np.int8)

    for r, (mc, yc) in enumerate(zip(m_cols, y_cols)):
        mv = df[mc].to_numpy(dtype=float)
        yv = df[yc].to_numpy(dtype=float)
        bad = (visit == 0) & (~np.isnan(mv) | ~np.isnan(yv))
        if bad.any():
            rownum = int(np.flatnonzero(bad)[0]) + 2  # 1-based + header line
            raise PanelValidationError(
                f"row {rownum}: {mc}/{yc} present where visit = 0")
        bad = (visit == 1) & np.isnan(mv)
        if bad.any():
            rownum = int(np.flatnonzero(bad)[0]) + 2
            raise PanelValidationError(f"row {rownum}: {mc} empty where visit = 1")
        bad = (mv == 0) & ~np.isnan(yv)
        if bad.any():
            rownum = int(np.flatnonzero(bad)[0]) + 2
            raise PanelValidationError(f"row {rownum}: {yc} present where {mc} = 0")
        bad = (mv == 1) & np.isnan(yv)
        if bad.any():
            rownum = int(np.flatnonzero(bad)[0]) + 2
            raise PanelValidationError(f"row {rownum}: {yc} empty where {mc} = 1")
        m[i_idx, j_idx, r] = np.nan_to_num(mv).astype(np.int8)
        y[i_idx, j_idx, r] = yv

    w = np.ones((n, 1 + len(w_cols)))
    u = np.ones((n, 1 + len(u_cols)))
    firsts = np.array([np.flatnonzero(ids == pid)[0] for pid in uniq])
    for col_set, target in ((w_cols, w), (u_cols, u)):
        for jcol, c in enumerate(col_set, start=1):
            vals = df[c].to_numpy(dtype=float)
            per_patient = vals.reshape(-1)[firsts]
            grouped = pd.Series(vals).groupby(i_idx).nunique(dropna=False)
            if (grouped > 1).any():
                raise PanelValidationError(f"covariate {c} varies within a patient")
            target[:, jcol] = per_patient

    return PanelData(t=t, d=d, m=m, y=y, w=w, u=u, patient_ids=uniq)


def save_panel_csv(data, path):
    """Emit the long-format CSV; inverse of :func:`load_panel_csv`."""
    n, J, R = data.y.shape
    rows = {
        "patient_id": np.repeat(data.patient_ids, J),
        "window": np.tile(np.arange(1, J + 1), n),
        "time": data.t.reshape(-1),
        "visit": data.d.reshape(-1),
    }
    d_flat = data.d.reshape(-1)
    for r in range(R):
        mv = data.m[:, :, r].reshape(-1).astype(float)
        mv = np.where(d_flat == 1, mv, np.nan)
        rows[f"m_{r + 1}"] = mv
        rows[f"y_{r + 1}"] = data.y[:, :, r].reshape(-1)
    for jcol in range(1, data.w.shape[1]):
        rows[f"w_{jcol}"] = np.repeat(data.w[:, jcol], J)
    for jcol in range(1, data.u.shape[1]):
        rows[f"u_{jcol}"] = np.repeat(data.u[:, jcol], J)
    df = pd.DataFrame(rows)
    df.to_csv(path, index=False, float_format="%.17g")
    return path


_MODEL_KEYS = {"K", "R", "J", "degree", "q", "response_modeled", "method"}
_PRIOR_KEYS = {
    "sigma_delta", "sigma_beta", "sigma_eta", "mu_phi", "sigma_phi",
    "sigma_lambda", "nu_sigma", "s_sigma", "nu_psi", "s_psi",
    "nu_omega", "s_omega", "nu_theta", "s_theta",
}


def _prior_matrix(value, dim):
    if np.isscalar(value):
        return float(value) * np.eye(dim)
    return np.asarray(value, dtype=float)


def load_config(path, s=None, e=1):
    """Read a model/priors JSON config; unknown keys are an error.

    Matrix-valued prior entries accept either a full matrix or a scalar
    multiplier of the identity.  ``s`` (class-covariate count) is needed
    to size the default delta prior; pass it from the data when the config
    omits sigma_delta.
    """
    with open(path) as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - {"model", "priors"}
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    model_cfg = dict(cfg.get("model", {}))
    unknown = set(model_cfg) - _MODEL_KEYS
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    if "response_modeled" in model_cfg:
        model_cfg["response_modeled"] = tuple(model_cfg["response_modeled"])
    spec = ModelSpec(**model_cfg)

    prior_cfg = dict(cfg.get("priors", {}))
    unknown = set(prior_cfg) - _PRIOR_KEYS
    if unknown:
        raise ValueError(f"unknown prior config keys: {sorted(unknown)}")
    if s is None:
        if "sigma_delta" in prior_cfg and not np.isscalar(prior_cfg["sigma_delta"]):
            s = len(prior_cfg["sigma_delta"])
        else:
            raise ValueError("class-covariate count s required to build priors")
    base = Priors.defaults(spec, s=s, e=e)
    dims = {
        "sigma_delta": s, "sigma_beta": spec.ph, "sigma_eta": e,
        "sigma_phi": spec.p, "sigma_lambda": spec.p,
        "s_sigma": spec.R, "s_psi": spec.q, "s_omega": spec.q, "s_theta": spec.q,
    }
    updates = {}
    for key, value in prior_cfg.items():
        if key.startswith("nu_"):
            updates[key] = float(value)
        elif key == "mu_phi":
            updates[key] = np.asarray(value, dtype=float)
        else:
            updates[key] = _prior_matrix(value, dims[key])
    return spec, replace(base, **updates)
