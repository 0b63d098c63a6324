"""Confounded PK-PD tumor-growth simulator.

Generates fully synthetic treatment/outcome trajectories in which a sigmoid
policy assigns chemotherapy and radiotherapy based on the recent mean tumor
diameter, so that treatment assignment is confounded with the outcome history.
The confounding strength is a single knob (``gamma``), which makes it easy to
build source/target domain pairs with controlled distribution shift, and the
generative state is retained per trajectory so counterfactual ground truth can
be rolled out for any alternative treatment plan.

Units: volumes in cm^3, diameters in cm, radiation doses in Gy, time in days.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .validation import check_binary, check_finite, check_nonnegative, check_positive

__all__ = [
    "PKPDParams",
    "PolicyParams",
    "PriorConfig",
    "DEFAULT_PRIORS",
    "Trajectory",
    "DomainSpec",
    "MAX_DIAMETER",
    "VOLUME_CAP",
    "VOLUME_FLOOR",
    "volume_from_diameter",
    "diameter_from_volume",
    "sample_patient_params",
    "tumor_volume_step",
    "assignment_probability",
    "simulate_trajectory",
    "generate_domain_dataset",
    "counterfactual_rollout",
]

# Tumors are treated as spheres; the policy operates on diameters while the
# growth dynamics operate on volumes.
MAX_DIAMETER = 13.0  # cm; policy scale and the volume cap
VOLUME_FLOOR = 0.01  # cm^3; volumes are clipped here instead of modeling recovery
VOLUME_CAP = 4.0 / 3.0 * math.pi * (MAX_DIAMETER / 2.0) ** 3  # ~1150.35 cm^3

PATIENT_TYPES = (1.0, 2.0, 3.0)


def volume_from_diameter(diameter: float) -> float:
    return 4.0 / 3.0 * math.pi * (diameter / 2.0) ** 3


def diameter_from_volume(volume) -> float | np.ndarray:
    return 2.0 * (3.0 * np.asarray(volume) / (4.0 * math.pi)) ** (1.0 / 3.0)


@dataclass(frozen=True)
class PriorConfig:
    """Log-normal priors for patient-specific dynamics parameters.

    These constants are the single source of truth for the simulator's
    population. They are calibrated so that a typical untreated tumor grows
    from about 1 cm^3 toward a carrying capacity in the 25-40 cm^3 range over
    a 60-day horizon, with treatment effects strong enough that a sustained
    plan visibly bends a trajectory. Each ``(log_mean, log_std)`` pair
    parameterizes ``LogNormal`` in natural-log space. On top of the log-normal
    draw, the discrete patient type scales the two treatment sensitivities by
    ``type_sensitivity`` (a mean-neutral mixture), mirroring the classical
    generator's type-dependent response adjustments.
    """

    carrying_capacity_log_mean: float = math.log(31.6)  # cm^3, bulk in [25, 40]
    carrying_capacity_log_std: float = 0.08
    growth_rate_log_mean: float = math.log(0.12)  # 1/day
    growth_rate_log_std: float = 0.12
    chemo_sensitivity_log_mean: float = math.log(0.04)  # per concentration unit
    chemo_sensitivity_log_std: float = 0.1
    radio_linear_log_mean: float = math.log(0.07)  # per Gy
    radio_linear_log_std: float = 0.1
    radio_quadratic_log_mean: float = math.log(0.007)  # per Gy^2
    radio_quadratic_log_std: float = 0.1
    initial_volume_log_mean: float = 0.0  # cm^3, median 1
    initial_volume_log_std: float = 0.5
    # patient type -> (chemo multiplier, radio multiplier); uniform over types
    type_sensitivity: tuple = ((1.0, 0.85, 1.15), (2.0, 1.0, 1.0), (3.0, 1.15, 0.85))

    def type_multipliers(self, patient_type: float) -> tuple[float, float]:
        for t, chemo_mult, radio_mult in self.type_sensitivity:
            if t == patient_type:
                return chemo_mult, radio_mult
        raise ValueError(f"unknown patient type {patient_type}")

    def _type_moments(self, column: int) -> tuple[float, float]:
        mults = [row[column] for row in self.type_sensitivity]
        first = sum(mults) / len(mults)
        second = sum(m * m for m in mults) / len(mults)
        return first, second

    def prior_mean(self, name: str) -> float:
        """Analytic mean of the marginal prior for ``name`` (type included)."""
        mu = getattr(self, f"{name}_log_mean")
        sigma = getattr(self, f"{name}_log_std")
        base = math.exp(mu + sigma**2 / 2.0)
        if name in ("chemo_sensitivity", "radio_linear", "radio_quadratic"):
            column = 1 if name == "chemo_sensitivity" else 2
            base *= self._type_moments(column)[0]
        return base

    def prior_std(self, name: str) -> float:
        mu = getattr(self, f"{name}_log_mean")
        sigma = getattr(self, f"{name}_log_std")
        second = math.exp(2.0 * mu + 2.0 * sigma**2)  # E[X^2] of the log-normal
        if name in ("chemo_sensitivity", "radio_linear", "radio_quadratic"):
            column = 1 if name == "chemo_sensitivity" else 2
            m1, m2 = self._type_moments(column)
            second *= m2
        return math.sqrt(second - self.prior_mean(name) ** 2)


DEFAULT_PRIORS = PriorConfig()


@dataclass(frozen=True)
class PKPDParams:
    """Patient-specific dynamics parameters.

    ``carrying_capacity`` bounds untreated growth; ``growth_rate`` scales the
    Gompertz log term; ``chemo_sensitivity`` multiplies the drug concentration;
    ``radio_linear``/``radio_quadratic`` form the linear-quadratic radiation
    response. Dosing constants describe how binary treatment decisions map to
    concentration (exponential decay plus impulse) and to a Gy impulse.
    """

    carrying_capacity: float
    growth_rate: float
    chemo_sensitivity: float
    radio_linear: float
    radio_quadratic: float
    noise_std: float = 0.01
    chemo_dose: float = 5.0
    radio_dose: float = 2.0
    chemo_half_life_steps: float = 1.0

    def __post_init__(self) -> None:
        check_positive(self.carrying_capacity, "carrying_capacity")
        check_nonnegative(self.noise_std, "noise_std")
        for name in ("growth_rate", "chemo_sensitivity", "radio_linear", "radio_quadratic"):
            check_nonnegative(getattr(self, name), name)
        check_positive(self.chemo_half_life_steps, "chemo_half_life_steps")

    @property
    def concentration_decay(self) -> float:
        """Per-step retention factor of the drug concentration."""
        return 2.0 ** (-1.0 / self.chemo_half_life_steps)


@dataclass(frozen=True)
class PolicyParams:
    """Sigmoid treatment-assignment policy parameters.

    The probability of applying a treatment at a given day is
    ``sigmoid(bias / max_diameter * (mean_diameter - threshold))`` where
    ``mean_diameter`` is averaged over the trailing ``window`` days. ``bias``
    (per treatment channel) controls the strength of the time-dependent
    confounding; zero bias yields unconfounded coin-flip assignment.
    """

    chemo_bias: float
    radio_bias: float
    max_diameter: float = MAX_DIAMETER
    chemo_threshold: float | None = None
    radio_threshold: float | None = None
    window: int = 15

    def __post_init__(self) -> None:
        check_positive(self.max_diameter, "max_diameter")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        for name in ("chemo_bias", "radio_bias"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.chemo_threshold is None:
            object.__setattr__(self, "chemo_threshold", self.max_diameter / 2.0)
        if self.radio_threshold is None:
            object.__setattr__(self, "radio_threshold", self.max_diameter / 2.0)

    @classmethod
    def from_gamma(cls, gamma: float, window: int = 15) -> "PolicyParams":
        """Policy with a shared confounding strength for both channels."""
        return cls(chemo_bias=gamma, radio_bias=gamma, window=window)


@dataclass
class Trajectory:
    """One subject's aligned observation arrays plus generative ground truth.

    Array layout (0-based step index ``i``):

    * ``covariates[i, 0]`` is the residual drug concentration carried into
      step ``i`` (decayed from the previous step, before today's application),
      so it is a function of strictly earlier treatments.
    * ``treatments[i]`` holds the binary (chemo, radio) decisions taken at
      step ``i``; they first affect the outcome at step ``i + 1``.
    * ``outcomes[i, 0]`` is the tumor volume at step ``i``.
    * ``noise[i]`` is the growth-noise draw used to produce ``outcomes[i]``
      (``noise[0]`` is unused and zero). Retained, with ``params``, so that
      counterfactual rollouts can reuse the factual noise sequence.
    """

    covariates: np.ndarray  # (T, 1)
    treatments: np.ndarray  # (T, 2) binary, columns (chemo, radio)
    outcomes: np.ndarray  # (T, 1)
    statics: np.ndarray  # (1,) patient-type indicator
    noise: np.ndarray  # (T,)
    params: PKPDParams
    subject_id: str = ""
    domain: str = ""
    split: str = ""

    def __post_init__(self) -> None:
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        self.treatments = np.asarray(self.treatments, dtype=np.float64)
        self.outcomes = np.asarray(self.outcomes, dtype=np.float64)
        self.statics = np.asarray(self.statics, dtype=np.float64)
        self.noise = np.asarray(self.noise, dtype=np.float64)
        n = self.covariates.shape[0]
        if not (self.treatments.shape[0] == self.outcomes.shape[0] == self.noise.shape[0] == n):
            raise ValueError("trajectory arrays must share their leading length")
        check_binary(self.treatments, "treatments")
        check_finite(self.covariates, "covariates")
        check_finite(self.outcomes, "outcomes")

    @property
    def length(self) -> int:
        return self.covariates.shape[0]

    def truncated(self, steps: int) -> "Trajectory":
        """First ``steps`` rows of every per-step array."""
        if not 1 <= steps <= self.length:
            raise ValueError(f"cannot truncate length-{self.length} trajectory at {steps}")
        return replace(
            self,
            covariates=self.covariates[:steps].copy(),
            treatments=self.treatments[:steps].copy(),
            outcomes=self.outcomes[:steps].copy(),
            noise=self.noise[:steps].copy(),
        )


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one simulated domain: confounding level, horizon, splits."""

    gamma: float
    horizon: int = 60
    n_train: int = 10000
    n_val: int = 1000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def paper_source(cls, seed: int = 0) -> "DomainSpec":
        return cls(gamma=10.0, horizon=60, n_train=10000, n_val=1000, n_test=1000, seed=seed)

    @classmethod
    def paper_target(cls, seed: int = 0) -> "DomainSpec":
        return cls(gamma=0.0, horizon=60, n_train=100, n_val=1000, n_test=1000, seed=seed)


def sample_patient_params(
    rng: np.random.Generator,
    priors: PriorConfig = DEFAULT_PRIORS,
    patient_type: float | None = None,
) -> PKPDParams:
    """Draw patient dynamics parameters from the documented priors.

    When ``patient_type`` is omitted it is drawn uniformly, so the returned
    parameters follow the full marginal prior either way; the type scales the
    chemo/radio sensitivities by the configured mean-neutral multipliers.
    """

    def draw(name: str) -> float:
        return float(
            rng.lognormal(getattr(priors, f"{name}_log_mean"), getattr(priors, f"{name}_log_std"))
        )

    if patient_type is None:
        patient_type = float(rng.choice(PATIENT_TYPES))
    chemo_mult, radio_mult = priors.type_multipliers(patient_type)
    return PKPDParams(
        carrying_capacity=draw("carrying_capacity"),
        growth_rate=draw("growth_rate"),
        chemo_sensitivity=draw("chemo_sensitivity") * chemo_mult,
        radio_linear=draw("radio_linear") * radio_mult,
        radio_quadratic=draw("radio_quadratic") * radio_mult,
    )


def tumor_volume_step(
    volume: float,
    chemo_concentration: float,
    radio_dose_gy: float,
    params: PKPDParams,
    noise: float,
) -> float:
    """Advance the tumor volume by one day.

    Gompertz growth toward the carrying capacity, reduced by the current drug
    concentration and by a linear-quadratic radiation term, with multiplicative
    noise. The result is clipped to ``[VOLUME_FLOOR, VOLUME_CAP]``.
    """
    if not volume > 0:
        raise ValueError(f"volume must be positive, got {volume}")
    growth = params.growth_rate * math.log(params.carrying_capacity / volume)
    chemo_kill = params.chemo_sensitivity * chemo_concentration
    radio_kill = params.radio_linear * radio_dose_gy + params.radio_quadratic * radio_dose_gy**2
    nxt = (1.0 + growth - chemo_kill - radio_kill + noise) * volume
    return float(min(max(nxt, VOLUME_FLOOR), VOLUME_CAP))


def assignment_probability(
    mean_diameter: float,
    gamma: float,
    policy: PolicyParams,
    threshold: float | None = None,
) -> float:
    """Probability of applying a treatment given the trailing mean diameter."""
    if mean_diameter < 0:
        raise ValueError(f"mean_diameter must be >= 0, got {mean_diameter}")
    if threshold is None:
        threshold = policy.max_diameter / 2.0
    z = gamma / policy.max_diameter * (mean_diameter - threshold)
    return float(1.0 / (1.0 + math.exp(-z)))


def _trailing_mean_diameter(volumes: list[float], step: int, window: int) -> float:
    """Mean diameter over steps ``max(0, step-window+1) .. step`` inclusive."""
    recent = volumes[max(0, step - window + 1) : step + 1]
    return float(np.mean(diameter_from_volume(np.asarray(recent))))


def simulate_trajectory(
    params: PKPDParams,
    policy: PolicyParams,
    horizon: int,
    rng: np.random.Generator,
    initial_volume: float | None = None,
    patient_type: float | None = None,
    priors: PriorConfig = DEFAULT_PRIORS,
) -> Trajectory:
    """Simulate one subject for ``horizon`` days under the biased policy.

    Per step: observe the residual drug concentration, draw the two treatment
    decisions from the sigmoid policy on the trailing mean diameter, update the
    concentration, then advance the volume. Fully deterministic given the
    generator state.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if initial_volume is None:
        initial_volume = float(
            rng.lognormal(priors.initial_volume_log_mean, priors.initial_volume_log_std)
        )
    if patient_type is None:
        patient_type = float(rng.choice(PATIENT_TYPES))
    check_positive(initial_volume, "initial_volume")

    covariates = np.zeros((horizon, 1))
    treatments = np.zeros((horizon, 2))
    outcomes = np.zeros((horizon, 1))
    noise = np.zeros(horizon)

    volumes = [min(max(initial_volume, VOLUME_FLOOR), VOLUME_CAP)]
    concentration = 0.0
    for step in range(horizon):
        residual = concentration * params.concentration_decay
        covariates[step, 0] = residual

        mean_diameter = _trailing_mean_diameter(volumes, step, policy.window)
        p_chemo = assignment_probability(mean_diameter, policy.chemo_bias, policy, policy.chemo_threshold)
        p_radio = assignment_probability(mean_diameter, policy.radio_bias, policy, policy.radio_threshold)
        apply_chemo = float(rng.random() < p_chemo)
        apply_radio = float(rng.random() < p_radio)
        treatments[step] = (apply_chemo, apply_radio)

        concentration = residual + params.chemo_dose * apply_chemo
        radio_dose_gy = params.radio_dose * apply_radio
        outcomes[step, 0] = volumes[step]

        if step + 1 < horizon:
            e = rng.normal(0.0, params.noise_std) if params.noise_std > 0 else 0.0
            noise[step + 1] = e
            volumes.append(tumor_volume_step(volumes[step], concentration, radio_dose_gy, params, e))

    return Trajectory(
        covariates=covariates,
        treatments=treatments,
        outcomes=outcomes,
        statics=np.array([patient_type]),
        noise=noise,
        params=params,
    )


def generate_domain_dataset(spec: DomainSpec, domain: str = "source"):
    """Simulate a full domain with disjoint train/val/test splits.

    Every subject gets fresh dynamics parameters and an independent seed
    stream spawned from ``spec.seed``, so generation is reproducible and
    order-independent across subjects.
    """
    from .data import DomainDataset  # local import to keep module layering one-way

    policy = PolicyParams.from_gamma(spec.gamma)
    counts = (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test))
    total = spec.n_train + spec.n_val + spec.n_test
    seeds = np.random.SeedSequence(spec.seed).spawn(total)

    trajectories: list[Trajectory] = []
    index = 0
    for split, count in counts:
        for _ in range(count):
            rng = np.random.default_rng(seeds[index])
            patient_type = float(rng.choice(PATIENT_TYPES))
            params = sample_patient_params(rng, patient_type=patient_type)
            traj = simulate_trajectory(params, policy, spec.horizon, rng, patient_type=patient_type)
            traj.subject_id = f"{domain}-{index:06d}"
            traj.domain = domain
            traj.split = split
            trajectories.append(traj)
            index += 1
    return DomainDataset(domain=domain, spec=spec, trajectories=trajectories)


def counterfactual_rollout(
    prefix: Trajectory,
    plan: np.ndarray,
    params: PKPDParams,
    n_samples: int = 1,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Ground-truth outcomes under a forced treatment plan.

    ``prefix`` is a trajectory truncated to ``t`` steps; ``plan`` has shape
    ``(tau, 2)`` and supplies the treatment decisions for steps
    ``t-1, t, ..., t+tau-2`` (the prefix's own final-step treatment entry is
    superseded by ``plan[0]``). Returns volumes at steps ``t .. t+tau-1`` with
    shape ``(n_samples, tau, 1)``. Only the growth noise is resampled across
    samples; passing ``noise`` (shape ``(tau,)``) pins it instead, which
    reproduces the factual suffix exactly when the plan is the factual one.
    """
    if prefix.length < 1:
        raise ValueError("prefix must contain at least one step")
    plan = np.asarray(plan, dtype=np.float64)
    if plan.ndim != 2 or plan.shape[1] != 2:
        raise ValueError(f"plan must have shape (tau, 2), got {plan.shape}")
    check_binary(plan, "plan")
    tau = plan.shape[0]
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (tau,):
            raise ValueError(f"noise must have shape ({tau},), got {noise.shape}")
    elif params.noise_std > 0 and rng is None:
        raise ValueError("rng is required when noise_std > 0 and no noise is supplied")

    start_volume = float(prefix.outcomes[-1, 0])
    start_residual = float(prefix.covariates[-1, 0])

    out = np.zeros((n_samples, tau, 1))
    for s in range(n_samples):
        if noise is not None:
            draws = noise
        elif params.noise_std > 0:
            draws = rng.normal(0.0, params.noise_std, size=tau)
        else:
            draws = np.zeros(tau)
        volume = start_volume
        residual = start_residual
        for u in range(tau):
            concentration = residual + params.chemo_dose * plan[u, 0]
            radio_dose_gy = params.radio_dose * plan[u, 1]
            volume = tumor_volume_step(volume, concentration, radio_dose_gy, params, float(draws[u]))
            out[s, u, 0] = volume
            residual = concentration * params.concentration_decay
    return out
