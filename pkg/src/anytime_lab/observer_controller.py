"""Observer/controller construction for stabilizing a plant over bit streams.

Pieces, bottom up:

* the virtual controlled process: a scalar copy of the plant kept inside a
  box by quantizing ``lam * xbar`` into 2^b uniform cells each step;
* back-substitution of box sizes through an upper-triangular Jordan block;
* replay control: a label that reaches the controller d (super-)steps late
  is applied multiplied by the d-th power of the step dynamics;
* batching controls / recovering the state over n-step windows for plants
  without full actuation or observation;
* the "dance": signalling channel outputs to the observer through the plant
  itself by adding symbol-indexed offsets to the control input;
* :class:`ClosedLoop`, which wires all of the above to a transport (the
  priority code over an erasure channel, or ideal parallel bit pipes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bounds import RateError
from .channels import BatchedPipe, _exact
from .priority_code import DecoderMirror, PriorityEncoder, enqueue_arrivals, make_streams, mirror_update, select_and_transmit
from .state_space import StateSpaceModel, StructureError, intrinsic_delay, numerical_rank, real_jordan

BOX_TOL = 1e-9  # relative slack when auditing box invariants
MAX_SCHEDULE_PERIOD = 10**6
DIVERGENCE_CLAMP = 1e300


class BoxViolation(AssertionError):
    pass


class DemodulationError(RuntimeError):
    pass


# -- scalar virtual process ----------------------------------------------------------


def delta_min(rate: float, lam: float, omega: float) -> float:
    """Smallest box size Delta = Omega / (1 - lam 2^-R) that the virtual process can hold."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    if omega < 0:
        raise ValueError("omega must be nonnegative")
    if rate <= math.log2(lam):
        raise RateError(f"rate {rate} below eigenvalue log {math.log2(lam):.6g}, no finite box")
    return omega / (1.0 - lam * 2.0 ** (-rate))


def label_budgets(rate, period: int = 1) -> np.ndarray:
    """Bits available to successive labels over one schedule period.

    Label k covers channel uses kL+1 .. (k+1)L and gets
    floor(R L (k+1)) - floor(R L k) bits.
    """
    r = _exact(rate) * period
    q = r.denominator
    if q > MAX_SCHEDULE_PERIOD:
        raise ValueError(f"rate {rate} has schedule period {q}; use a rate with a short decimal expansion")
    cum = [(r.numerator * k) // q for k in range(q + 1)]
    return np.diff(np.array(cum, dtype=np.int64))


def box_profile(lam: float, omega: float, budgets, gamma: float = 0.0) -> np.ndarray:
    """Periodic bound h_phi on |xbar| at the start of each schedule phase.

    One step maps h to lam (h + gamma) 2^-b + lam gamma + omega/2, where
    gamma bounds the observer's error on xbar; the profile is the periodic
    fixed point of that affine recursion.
    """
    b = np.asarray(budgets, dtype=float)
    a = lam * 2.0 ** (-b)
    c = a * gamma + lam * gamma + omega / 2.0
    log_period_gain = b.size * math.log2(lam) - float(b.sum())
    if log_period_gain >= 0:
        raise RateError("schedule rate does not exceed log2(lam); no bounded box")
    h = 0.0
    for ai, ci in zip(a, c):
        h = ai * h + ci
    h0 = h / (1.0 - 2.0**log_period_gain)
    prof = np.empty(b.size)
    h = h0
    for k in range(b.size):
        prof[k] = h
        h = a[k] * h + c[k]
    return prof


def cell_label(y: float, halfwidth: float, bits: int) -> int:
    """Index (0-based, left to right) of the cell of [-W, W] split into 2^bits that holds y."""
    n = 1 << bits
    if n == 1 or halfwidth <= 0:
        return 0
    c = int(math.floor((y + halfwidth) * n / (2.0 * halfwidth)))
    return min(max(c, 0), n - 1)


def cell_center(label: int, halfwidth: float, bits: int) -> float:
    return -halfwidth + (2 * label + 1) * halfwidth / (1 << bits)


def label_to_bits(label: int, bits: int) -> list[int]:
    """Natural binary, most significant bit first."""
    return [(label >> (bits - 1 - k)) & 1 for k in range(bits)]


def bits_to_label(bits) -> int:
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


@dataclass
class VirtualProcess:
    """xbar_{t+1} = lam xbar_t + w_t + ubar_t with ubar chosen from R-bit labels."""

    xbar: float
    delta: float
    lam: float
    rate: float
    omega: float
    gamma: float = 0.0
    budgets: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=np.int64))
    profile: np.ndarray = field(default_factory=lambda: np.zeros(1))
    phase: int = 0

    @classmethod
    def create(cls, lam: float, rate: float, omega: float, gamma: float = 0.0, period: int = 1, xbar: float = 0.0):
        if lam <= 0:
            raise ValueError("lam must be positive")
        if rate * period <= math.log2(lam):
            raise RateError(f"rate {rate} below eigenvalue log {math.log2(lam) / period:.6g}, no finite box")
        budgets = label_budgets(rate, period)
        profile = box_profile(lam, omega, budgets, gamma)
        return cls(xbar, 2.0 * float(profile.max()), lam, rate, omega, gamma, budgets, profile)

    @property
    def bound(self) -> float:
        return float(self.profile[self.phase])

    @property
    def bits(self) -> int:
        return int(self.budgets[self.phase])

    @property
    def window(self) -> float:
        return self.lam * (self.bound + self.gamma)


def virtual_step(vp: VirtualProcess, w: float, estimate: float | None = None) -> tuple[int, float]:
    """Advance the virtual process one step; returns (label, ubar).

    ``estimate`` is the observer's view of xbar (defaults to the exact value);
    its error must stay within ``vp.gamma``.
    """
    tol = BOX_TOL * max(vp.delta, 1.0)
    if abs(w) > vp.omega / 2 + tol:
        raise ValueError(f"|w| = {abs(w)} exceeds omega/2 = {vp.omega / 2}")
    if abs(vp.xbar) > vp.bound + tol:
        raise BoxViolation(f"|xbar| = {abs(vp.xbar)} outside box {vp.bound}")
    est = vp.xbar if estimate is None else estimate
    b, W = vp.bits, vp.window
    label = cell_label(vp.lam * est, W, b)
    ubar = -cell_center(label, W, b)
    vp.xbar = vp.lam * vp.xbar + ubar + w
    vp.phase = (vp.phase + 1) % vp.budgets.size
    if abs(vp.xbar) > vp.bound + tol:
        raise BoxViolation(f"|xbar| = {abs(vp.xbar)} left box {vp.bound}")
    return label, ubar


# -- Jordan blocks -----------------------------------------------------------------


@dataclass(frozen=True)
class JordanBlockPlan:
    block: np.ndarray
    omegas: np.ndarray  # inflated disturbance widths per dimension
    deltas: np.ndarray  # box sizes per dimension
    rate: float
    lam: float


def jordan_plan(block, rate: float, omega) -> JordanBlockPlan:
    """Box sizes for an upper-triangular block, last dimension first.

    Dimension i sees the couplings sum_{j>i} a_ij xbar_j as extra disturbance,
    so Omega_i = Omega + sum_{j>i} |a_ij| Delta_j.
    """
    A = np.atleast_2d(np.asarray(block, dtype=float))
    n = A.shape[0]
    lam = float(A[0, 0])
    if np.any(np.abs(np.tril(A, -1)) > 0):
        raise ValueError("block must be upper-triangular")
    if np.any(np.abs(np.diag(A) - lam) > 1e-12 * abs(lam)):
        raise ValueError("block must have a constant diagonal")
    base = np.broadcast_to(np.asarray(omega, dtype=float), (n,))
    omegas = np.zeros(n)
    deltas = np.zeros(n)
    for i in range(n - 1, -1, -1):
        omegas[i] = base[i] + float(np.abs(A[i, i + 1 :]) @ deltas[i + 1 :])
        deltas[i] = delta_min(rate, abs(lam), omegas[i])
    return JordanBlockPlan(A, omegas, deltas, rate, lam)


# -- replay control ----------------------------------------------------------------


@dataclass
class ControllerShadow:
    """Controls the controller has applied, kept as (applied at, designed at, index, ubar).

    ``step_matrix`` is the (super-)step dynamics in the coordinates the labels
    live in; the state due to applied controls alone is recomputable from the
    history (:meth:`xtilde`).
    """

    step_matrix: np.ndarray
    history: list = field(default_factory=list)
    _powers: list = field(default_factory=list)

    def power(self, d: int) -> np.ndarray:
        if not self._powers:
            self._powers.append(np.eye(self.step_matrix.shape[0]))
        while len(self._powers) <= d:
            self._powers.append(self.step_matrix @ self._powers[-1])
        return self._powers[d]

    def xtilde(self, k: int) -> np.ndarray:
        """State at step k driven only by the applied corrections."""
        x = np.zeros(self.step_matrix.shape[0])
        applied = {}
        for ka, k0, i, ubar in self.history:
            applied.setdefault(ka, np.zeros_like(x))
            applied[ka] = applied[ka] + self.power(ka - k0)[:, i] * ubar
        for s in range(k):
            x = self.step_matrix @ x + applied.get(s, 0.0)
        return x


def controller_apply(shadow: ControllerShadow, learned, k: int) -> np.ndarray:
    """Correction to apply at step k for labels that just became known.

    ``learned`` holds (k0, index, ubar) triples: label designed for step k0
    on coordinate ``index``. Its intended effect is carried forward by the
    step dynamics, so a label d = k - k0 steps late contributes
    M^d e_index ubar.
    """
    total = np.zeros(shadow.step_matrix.shape[0])
    for k0, i, ubar in learned:
        d = k - k0
        if d < 0:
            raise ValueError("cannot apply a label before it is designed")
        total += shadow.power(d)[:, i] * ubar
        shadow.history.append((k, k0, i, ubar))
    return total


# -- batching and state recovery -----------------------------------------------------


class BatchPlanner:
    """Least-norm L-step control sequences realizing a desired state increment."""

    def __init__(self, A, B_u, steps: int | None = None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B_u, dtype=float).reshape(A.shape[0], -1)
        n, m = B.shape
        self.steps = steps or n
        blocks = []
        Ak = np.eye(n)
        for _ in range(self.steps):
            blocks.append(Ak @ B)
            Ak = A @ Ak
        # column block j multiplies the control applied at step j of the batch
        G = np.hstack(blocks[::-1])
        if numerical_rank(G) < n:
            raise StructureError(f"(A, B_u) not reachable in {self.steps} steps")
        self.m = m
        self.G = G
        self.pinv = np.linalg.pinv(G)

    def plan(self, desired) -> np.ndarray:
        return (self.pinv @ np.asarray(desired, dtype=float)).reshape(self.steps, self.m)


def batch_controls(desired, A, B_u, steps: int | None = None) -> np.ndarray:
    """Controls u_0..u_{L-1} whose net effect after L steps is the increment ``desired``."""
    return BatchPlanner(A, B_u, steps).plan(desired)


@dataclass(frozen=True)
class StateEstimate:
    x: np.ndarray
    bound: np.ndarray  # worst-case |x_hat_i - x_i| per coordinate
    gamma_prime: float  # 2 max(bound), on the same footing as Gamma


class RecoveryMap:
    """Recover the first state of an L-observation window with known controls.

    Y_j = C A^j x_0 + sum_{i<j} C A^{j-1-i} (B_u u_i + B_w w_i) + N_j; the
    known control part is subtracted and the observability map inverted.
    """

    def __init__(self, model: StateSpaceModel, steps: int | None = None):
        A, C = model.A, model.C_y
        n, my = model.n, model.m_y
        L = steps or n
        powers = [np.eye(n)]
        for _ in range(L):
            powers.append(A @ powers[-1])
        O = np.vstack([C @ powers[j] for j in range(L)])
        if numerical_rank(O) < n:
            raise StructureError(f"(A, C_y) not observable from {L} observations")
        self.model, self.steps, self.powers = model, L, powers
        self.pinv = np.linalg.pinv(O)
        Tu = np.zeros((L * my, max(L - 1, 0) * model.m_u))
        Tw = np.zeros((L * my, max(L - 1, 0) * model.m_w))
        for j in range(L):
            for i in range(j):
                Tu[j * my : (j + 1) * my, i * model.m_u : (i + 1) * model.m_u] = C @ powers[j - 1 - i] @ model.B_u
                Tw[j * my : (j + 1) * my, i * model.m_w : (i + 1) * model.m_w] = C @ powers[j - 1 - i] @ model.B_w
        self.Tu, self.Tw = Tu, Tw
        # estimation error = -pinv (Tw w + N)
        self.err_w = -self.pinv @ Tw
        self.err_n = -self.pinv
        self.bound = np.abs(self.err_w).sum(axis=1) * model.omega / 2 + np.abs(self.err_n).sum(axis=1) * model.gamma / 2

    def estimate(self, observations, controls) -> np.ndarray:
        y = np.asarray(observations, dtype=float).reshape(-1)
        if self.Tu.shape[1]:
            y = y - self.Tu @ np.asarray(controls, dtype=float).reshape(-1)
        return self.pinv @ y


def recover_state(observations, controls, model: StateSpaceModel, steps: int | None = None) -> StateEstimate:
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    rmap = RecoveryMap(model, steps or obs.shape[0])
    ctrl = np.asarray(controls, dtype=float).reshape(-1, model.m_u)[: rmap.steps - 1]
    return StateEstimate(rmap.estimate(obs, ctrl), rmap.bound, 2.0 * float(rmap.bound.max(initial=0.0)))


# -- the dance -----------------------------------------------------------------------


@dataclass(frozen=True)
class DancePlan:
    psi: np.ndarray  # response of Y to input `input_index`, Theta steps later
    psibar: float
    gamma2: float  # worst-case error of the predicted observation on `output_index`
    amplitude: float
    alphabet: int
    theta: int
    input_index: int
    output_index: int
    window: int
    factor: float = 3.0

    def __post_init__(self):
        if self.gamma2 > 0 and not self.amplitude * self.psibar > 2 * self.gamma2:
            raise DemodulationError("symbol spacing does not clear twice the noise bound")


def dance_gamma2(model: StateSpaceModel, window: int, output_index: int) -> float:
    """Exact worst case of Y_{s+L}[k] minus its prediction from the window Y_s..Y_{s+L-1}."""
    rmap = RecoveryMap(model, window)
    L, my, mw = window, model.m_y, model.m_w
    A, C, Bw = model.A, model.C_y, model.B_w
    ck = C[output_index]
    lead = ck @ rmap.powers[L]
    coef_w = np.zeros(L * mw)
    if L > 1:
        coef_w[: (L - 1) * mw] = -lead @ (rmap.pinv @ rmap.Tw)
    for j in range(L):
        coef_w[j * mw : (j + 1) * mw] += ck @ rmap.powers[L - 1 - j] @ Bw
    coef_n = -lead @ rmap.pinv
    return float(np.abs(coef_w).sum() * model.omega / 2 + (np.abs(coef_n).sum() + 1.0) * model.gamma / 2)


def dance_plan(model: StateSpaceModel, alphabet: int, factor: float = 3.0, window: int | None = None) -> DancePlan:
    if alphabet < 2:
        raise ValueError("alphabet needs at least two symbols")
    if factor <= 2:
        raise ValueError("factor must exceed 2 for unambiguous demodulation")
    theta = intrinsic_delay(model)
    M = model.C_y @ np.linalg.matrix_power(model.A, theta) @ model.B_u
    p = int(np.argmax(np.max(np.abs(M), axis=0)))
    psi = M[:, p]
    k = int(np.argmax(np.abs(psi)))
    psibar = float(abs(psi[k]))
    L = window or model.n
    g2 = dance_gamma2(model, L, k)
    amp = factor * g2 / psibar if g2 > 0 else 1.0 / psibar
    return DancePlan(psi, psibar, g2, amp, alphabet, theta, p, k, L, factor)


def dance_encode(plan: DancePlan, z: int, m_u: int) -> np.ndarray:
    if not 1 <= z <= plan.alphabet:
        raise ValueError(f"symbol {z} outside 1..{plan.alphabet}")
    u = np.zeros(m_u)
    u[plan.input_index] = plan.amplitude * z
    return u


def dance_decode(plan: DancePlan, shift: float) -> int:
    """Symbol whose offset psi_k * amplitude * z is nearest the observed shift."""
    z = int(round(shift / (plan.psi[plan.output_index] * plan.amplitude)))
    if not 1 <= z <= plan.alphabet:
        raise DemodulationError(f"demodulated symbol {z} outside 1..{plan.alphabet}")
    return z


def counter_controls(plan: DancePlan, model: StateSpaceModel, steps: int | None = None) -> np.ndarray:
    """Controls for the steps after a unit dance offset that cancel it exactly after L steps."""
    L = steps or model.n
    kick = model.B_u[:, plan.input_index] * plan.amplitude
    target = -np.linalg.matrix_power(model.A, L) @ kick
    return batch_controls(target, model.A, model.B_u, L)


# -- closed loop -----------------------------------------------------------------------


@dataclass(frozen=True)
class LoopConfig:
    """How the observer, transport and controller are put together.

    rates: bits per channel use for each unstable Jordan coordinate, ordered
        by decreasing eigenvalue magnitude.
    transport: "code" shares one erasure channel through the priority code;
        "pipe" gives every stream its own noiseless bit pipe.
    discipline: "priority" or "fifo" (one shared queue, no differentiation).
    feedback: "explicit" (encoder and observer see channel outputs one step
        later) or "dance" (channel outputs are signalled through the plant).
    superstep: control/observation batch length; defaults to 1 for fully
        actuated, fully observed plants and to the state dimension otherwise.
    """

    rates: tuple
    priorities: tuple | None = None
    transport: str = "code"
    discipline: str = "priority"
    feedback: str = "explicit"
    superstep: int | None = None
    dance_factor: float = 3.0

    def __post_init__(self):
        if self.transport not in ("code", "pipe"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.feedback not in ("explicit", "dance"):
            raise ValueError(f"unknown feedback mode {self.feedback!r}")
        if self.feedback == "dance" and self.transport != "code":
            raise ValueError("dance feedback signals channel outputs, so it needs the coded transport")


def erasure_symbol(erased: bool, bit: int) -> int:
    """Channel output as a dance symbol: bits 0/1 -> 1/2, erasure -> 3."""
    return 3 if erased else 1 + int(bit)


def _frame_bound(g: np.ndarray, blocks) -> np.ndarray:
    """Bound per Jordan coordinate after an arbitrary rotation within complex pairs."""
    out = g.copy()
    for blk in blocks:
        if blk.angle is not None and blk.size == 2 and blk.angle not in (0.0, math.pi):
            i = blk.start
            r = math.hypot(g[i], g[i + 1])
            out[i] = out[i + 1] = r
    return out


class ClosedLoop:
    """Observer + transport + replay controller for one plant, stepped one channel use at a time.

    Time runs t = 0, 1, ...; the plant is X_{t+1} = A X_t + B_u U_t + B_w W_t
    and the channel use at time t happens between the observer reading Y_t
    and the controller choosing U_t. Super-step k spans t in [kL, kL+L).
    Labels live in the rotating Jordan frame R^{-Lk} V X_{kL}, where the
    super-step dynamics are the real upper-triangular Lambda^L.
    """

    def __init__(self, model: StateSpaceModel, cfg: LoopConfig, w_init=None):
        self.model, self.cfg = model, cfg
        A, n = model.A, model.n
        full = model.m_u >= n and numerical_rank(model.B_u) == n and numerical_rank(model.C_y) == n
        L = cfg.superstep or (1 if full else n)
        self.theta_io = intrinsic_delay(model) if cfg.feedback == "dance" else 0
        if cfg.feedback == "dance":
            # the observer must know every control that shaped its window
            L = max(L, n, self.theta_io + 2)
        self.L = L

        jf = real_jordan(A)
        self.jf = jf
        self.V, self.Vinv = jf.V, jf.V_inv
        self.LamL = np.linalg.matrix_power(jf.Lambda, L)
        self.RL = np.linalg.matrix_power(jf.R, L)
        self._eye = np.eye(n)
        self._static_frame = all(b.angle is None for b in jf.blocks)
        self.dims: list[int] = []
        mags: list[float] = []
        for blk in jf.blocks:
            if blk.magnitude > 1.0:
                for i in range(blk.start, blk.start + blk.size):
                    self.dims.append(i)
                    mags.append(blk.magnitude)
        if len(cfg.rates) != len(self.dims):
            raise ValueError(f"need one rate per unstable coordinate: got {len(cfg.rates)}, need {len(self.dims)}")
        for r, mag in zip(cfg.rates, mags):
            if r <= math.log2(mag):
                raise RateError(
                    f"stream rate {r} does not exceed log2|lambda| = {math.log2(mag):.6g}; "
                    "stabilization needs rate log2|lambda| + epsilon on every unstable coordinate"
                )
        if cfg.transport == "code" and sum(cfg.rates) >= 1.0:
            raise RateError(f"sum rate {sum(cfg.rates):.6g} does not fit one binary channel use per step")

        self.rmap = RecoveryMap(model, L)
        self.planner = BatchPlanner(A, model.B_u, L)
        Gw = np.hstack([np.linalg.matrix_power(A, L - 1 - j) @ model.B_w for j in range(L)])
        omega_half = _frame_bound(np.abs(self.V @ Gw).sum(axis=1) * model.omega / 2, jf.blocks)
        gamma_half = _frame_bound(np.abs(self.V) @ self.rmap.bound, jf.blocks)

        # per-coordinate virtual processes, back-substituted from the end of each block
        self.vps: dict[int, VirtualProcess] = {}
        rate_of = dict(zip(self.dims, cfg.rates))
        for i in sorted(self.dims, reverse=True):
            blk = next(b for b in jf.blocks if b.start <= i < b.start + b.size)
            coupling = sum(
                abs(self.LamL[i, j]) * self.vps[j].delta
                for j in range(i + 1, blk.start + blk.size)
                if j in self.vps
            )
            self.vps[i] = VirtualProcess.create(
                blk.magnitude**L, rate_of[i], 2 * omega_half[i] + coupling, gamma_half[i], period=L
            )

        k_streams = len(self.dims)
        self.pipes = [BatchedPipe(r, L) for r in cfg.rates]
        self._cum = [(p.exact_rate * L) for p in self.pipes]
        if cfg.transport == "code":
            streams = make_streams(cfg.rates, cfg.priorities)
            theta = 1 if cfg.feedback == "explicit" else self.theta_io + 1
            self.enc = PriorityEncoder(streams, theta, None, self.pipes, cfg.discipline)
            self.dec = DecoderMirror(streams, theta, False, self.pipes, cfg.discipline)
            for i in range(k_streams):
                self.enc.push_bits(i, [])
        else:
            self.enc = self.dec = None
            self._pipe_bits: list[list[int]] = [[] for _ in range(k_streams)]

        self.dance = None
        if cfg.feedback == "dance":
            self.dance = dance_plan(model, 3, cfg.dance_factor, window=n)
            self.dance_rmap = RecoveryMap(model, n)
            self.cancel_unit = counter_controls(self.dance, model, n)
            self.dance_errors = 0
            self.dance_decoded = 0
            self.dance_worst = 0.0  # max |prediction error| / gamma2 seen

        # histories, padded so negative times read as the quiet pre-start plant
        self._pad = n + L + 2
        zeros_y, zeros_u = np.zeros(model.m_y), np.zeros(model.m_u)
        self.Y = [zeros_y] * self._pad
        self.U_obs = [zeros_u] * self._pad
        self._obs_extra: dict[int, np.ndarray] = {}
        self.Z: list[int] = []
        self._cancel: dict[int, np.ndarray] = {}

        w0 = np.zeros(model.m_w) if w_init is None else np.asarray(w_init, dtype=float)
        self.x = model.B_w @ w0
        self.d = np.zeros(n)  # state due to dance offsets and their cancellations
        if self.dance is not None:
            # state effect m = 1..n steps after a unit dance offset, cancellations included
            resp = [model.B_u @ dance_encode(self.dance, 1, model.m_u)]
            for q in range(n - 1):
                resp.append(model.A @ resp[-1] + model.B_u @ self.cancel_unit[q])
            self._dance_resp = resp
        self.t = 0
        self.E = np.zeros(n)  # virtual minus actual, rotating frame
        self._open: dict = {}  # (k0, coord) -> [ubar, super-step applied or None]
        self.shadow = ControllerShadow(self.LamL)
        self.next_label = [0] * k_streams
        self.ubar: list[np.ndarray] = []
        self.corrections: list[np.ndarray] = []
        self.base = np.zeros((L, model.m_u))
        self._x_start = self.x.copy()
        self._d_start = self.d.copy()
        self.xbar = np.zeros(n)  # true virtual state at the latest super-step boundary
        self.box_ratio = 0.0  # max |xbar_i| / bound_i seen
        self.box_violations = 0
        self.diverged = False
        self.u = np.zeros(model.m_u)  # control applied at the latest step

    def rotation(self, m: int) -> np.ndarray:
        """R^m, built from the block angles so long runs do not accumulate drift."""
        if self._static_frame:
            return self._eye
        out = np.eye(self.model.n)
        for blk in self.jf.blocks:
            i = blk.start
            if blk.angle is None:
                continue
            if blk.size == 2 and blk.angle not in (0.0, math.pi):
                c, s = math.cos(m * blk.angle), math.sin(m * blk.angle)
                out[i : i + 2, i : i + 2] = [[c, s], [-s, c]]
            else:
                sl = slice(i, i + blk.size)
                out[sl, sl] = np.eye(blk.size) * (math.cos(m * blk.angle) if blk.angle else 1.0)
        return out

    # -- observer ------------------------------------------------------------------

    def _push_bits(self, i: int, bits: list[int]) -> None:
        if self.enc is not None:
            self.enc.push_bits(i, bits)
        else:
            self._pipe_bits[i].extend(bits)

    def _delivered(self, i: int) -> list[int]:
        return self.dec.values[i] if self.dec is not None else self._pipe_bits[i]

    def _observer_superstep(self, k: int) -> None:
        L, P = self.L, self._pad
        self.E = self._deficit(k)
        s0 = k * L
        obs = np.concatenate(self.Y[P + s0 : P + s0 + L])
        ctrl = np.concatenate(self.U_obs[P + s0 : P + s0 + L - 1]) if L > 1 else np.zeros(0)
        xhat = self.rmap.estimate(obs, ctrl)
        back = self.rotation(L * k).T @ self.V
        xbar_hat = back @ (xhat - self._d_start) + self.E
        self.xbar = back @ (self._x_start - self._d_start) + self.E
        ub = np.zeros(self.model.n)
        for i in self.dims:
            vp = self.vps[i]
            vp.phase = k % vp.budgets.size
            h = vp.bound
            ratio = abs(self.xbar[i]) / h if h > 0 else (0.0 if self.xbar[i] == 0 else math.inf)
            self.box_ratio = max(self.box_ratio, ratio)
            if abs(self.xbar[i]) > h * (1 + BOX_TOL) + BOX_TOL:
                self.box_violations += 1
            b, W = vp.bits, vp.window
            label = cell_label(vp.lam * xbar_hat[i], W, b)
            ub[i] = -cell_center(label, W, b)
            if b:
                self._push_bits(self.dims.index(i), label_to_bits(label, b))
                if ub[i] != 0.0:
                    self._open[(k, i)] = [ub[i], None]
        self.ubar.append(ub)

    def _deficit(self, k: int) -> np.ndarray:
        """Virtual minus actual state at super-step k (rotating frame).

        Summed explicitly over labels not yet applied before step k: the
        equivalent recursion E <- Lambda^L E + ubar - c is unstable and would
        amplify round-off left behind by every cancelled label.
        """
        E = np.zeros(self.model.n)
        done = []
        for (k0, i), (ub, applied) in self._open.items():
            if applied is not None and applied < k:
                done.append((k0, i))
            elif k0 < k:
                E += self.shadow.power(k - 1 - k0)[:, i] * ub
        for key in done:
            del self._open[key]
        return E

    def _dance_decode(self, t: int) -> None:
        plan, n, P = self.dance, self.model.n, self._pad
        j = t - plan.theta - 1
        s = t - n
        obs = np.concatenate(self.Y[P + s : P + t])
        ctrl = np.concatenate(self.U_obs[P + s : P + t - 1]) if n > 1 else np.zeros(0)
        xs = self.dance_rmap.estimate(obs, ctrl)
        A, B, C = self.model.A, self.model.B_u, self.model.C_y
        x = xs
        for i in range(s, t):
            x = A @ x + B @ self.U_obs[P + i]
        pred = C[plan.output_index] @ x
        shift = self.Y[P + t][plan.output_index] - pred
        z = dance_decode(plan, shift)
        true_z = self.Z[j]
        self.dance_decoded += 1
        if z != true_z:
            self.dance_errors += 1
        err = shift - plan.psi[plan.output_index] * plan.amplitude * true_z
        if plan.gamma2 > 0:
            self.dance_worst = max(self.dance_worst, abs(err) / plan.gamma2)
        # the observer now knows the dance offset at j and its cancellation
        self._obs_add(j, dance_encode(plan, z, self.model.m_u))
        for q in range(n):
            self._obs_add(j + 1 + q, self.cancel_unit[q] * z)

    def _obs_add(self, time: int, vec: np.ndarray) -> None:
        idx = self._pad + time
        if idx < len(self.U_obs):
            self.U_obs[idx] = self.U_obs[idx] + vec
        else:
            self._obs_extra[time] = self._obs_extra.get(time, 0.0) + vec

    # -- controller ----------------------------------------------------------------

    def _plan_superstep(self, k: int) -> None:
        t = k * self.L
        designed = (t + 1) // self.L  # labels 0 .. designed-1 exist by now
        learned = []
        for s, i in enumerate(self.dims):
            vals = self._delivered(s)
            cum = self._cum[s]
            while self.next_label[s] < designed:
                k0 = self.next_label[s]
                lo = (cum.numerator * k0) // cum.denominator
                hi = (cum.numerator * (k0 + 1)) // cum.denominator
                if len(vals) < hi:
                    break
                vp = self.vps[i]
                ph = k0 % vp.budgets.size
                b = hi - lo
                W = vp.lam * (vp.profile[ph] + vp.gamma)
                ubar = -cell_center(bits_to_label(vals[lo:hi]), W, b)
                learned.append((k0, i, ubar))
                if (k0, i) in self._open:
                    self._open[(k0, i)][1] = k
                self.next_label[s] += 1
        c = controller_apply(self.shadow, learned, k)
        self.corrections.append(c)
        inc = self.Vinv @ self.rotation(self.L * (k + 1)) @ c
        self.base = self.planner.plan(inc)

    # -- one channel use ---------------------------------------------------------------

    def step(self, w, nnoise, erased: bool = False) -> np.ndarray:
        """Advance one time step; returns the new state."""
        m, L, P, t = self.model, self.L, self._pad, self.t
        w = np.asarray(w, dtype=float)
        nnoise = np.asarray(nnoise, dtype=float)
        if np.max(np.abs(w), initial=0.0) > m.omega / 2 * (1 + 1e-12):
            raise ValueError("disturbance exceeds omega/2")
        if np.max(np.abs(nnoise), initial=0.0) > m.gamma / 2 * (1 + 1e-12):
            raise ValueError("observation noise exceeds gamma/2")
        if t % L == 0:
            self._x_start = self.x.copy()
            self._d_start = self.d.copy()
        self.Y.append(m.C_y @ self.x + nnoise)
        if self.dance is not None and t - self.dance.theta - 1 >= 0:
            self._dance_decode(t)
        if (t + 1) % L == 0:
            self._observer_superstep((t + 1) // L - 1)

        z = None
        if self.enc is not None:
            enqueue_arrivals(self.enc, t + 1)
            ev = select_and_transmit(self.enc, bool(erased))
            mirror_update(self.dec, ev)
            z = erasure_symbol(ev.erased, ev.input)
            self.Z.append(z)

        if t % L == 0:
            self._plan_superstep(t // L)
        base = self.base[t % L]
        extra = np.zeros(m.m_u)
        if self.dance is not None:
            extra = extra + dance_encode(self.dance, z, m.m_u)
            for q in range(m.n):
                key = t + 1 + q
                self._cancel[key] = self._cancel.get(key, 0.0) + self.cancel_unit[q] * z
            extra = extra + self._cancel.pop(t, 0.0)
        u = base + extra
        self.u = u
        self.U_obs.append(base + self._obs_extra.pop(t, 0.0))
        if self.dance is not None:
            # finite window sum; the offset is fully cancelled n + 1 steps later
            self.d = sum(
                (self._dance_resp[t - j] * self.Z[j] for j in range(max(0, t + 1 - m.n), t + 1)),
                np.zeros(m.n),
            )
        x = m.A @ self.x + m.B_u @ u + m.B_w @ w
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_CLAMP:
            self.diverged = True
            x = np.clip(np.nan_to_num(x, nan=DIVERGENCE_CLAMP), -DIVERGENCE_CLAMP, DIVERGENCE_CLAMP)
        self.x = x
        self.t = t + 1
        return x

    def push_direction(self) -> np.ndarray:
        """Disturbance direction that pushes the unstable virtual coordinates outward."""
        sgn = np.zeros(self.model.n)
        for i in self.dims:
            sgn[i] = 1.0 if self.xbar[i] >= 0 else -1.0
        back = self.rotation(self.L * (self.t // self.L)).T @ self.V @ self.model.B_w
        return back.T @ sgn


def build_closed_loop(model: StateSpaceModel, cfg: LoopConfig, w_init=None) -> ClosedLoop:
    return ClosedLoop(model, cfg, w_init)
