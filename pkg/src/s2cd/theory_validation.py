"""Exact tabular harness for the mixed-policy guarantees.

On small finite MDPs, everything is computed to numerical precision: policy
values by fixed-point iteration (cross-checked against direct linear solves
in the tests), discounted state visitation by linear solve, and the
Q-value-gap switch applied state by state.

Two certificates are produced per instance:

* improvement guarantee: with greedy (deterministic) policy representatives
  and zero tolerance, the mixed policy's value is no less than the
  teacher's at every state, hence also under the initial distribution.
* performance bound: |J_mix - J_teacher| is bounded by
  sqrt(2) * (1 - omega) * R_max / (1 - gamma)^2 * E_{d_mix}[sqrt(KL(teacher || student))].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VALUE_TOL = 1e-12


@dataclass
class TabularMdp:
    transitions: np.ndarray      # (S, A, S) row-stochastic in the last axis
    rewards: np.ndarray          # (S, A)
    gamma: float
    initial_dist: np.ndarray     # (S,)

    def __post_init__(self) -> None:
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        s, a, s2 = self.transitions.shape
        if s != s2 or self.rewards.shape != (s, a):
            raise ValueError("transition/reward shape mismatch")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        rowsums = self.transitions.sum(axis=2)
        if np.any(np.abs(rowsums - 1.0) > 1e-12) or np.any(self.transitions < 0):
            raise ValueError("transition rows must be stochastic")
        if abs(self.initial_dist.sum() - 1.0) > 1e-12 or np.any(self.initial_dist < 0):
            raise ValueError("initial distribution must be stochastic")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.rewards).max())


def validate_policy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy shape mismatch")
    if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("policy rows must be stochastic")
    return policy


def policy_transition(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """State-to-state kernel P_pi(s' | s) = sum_a pi(a|s) P(s'|s,a)."""
    return np.einsum("sa,sat->st", policy, mdp.transitions)


def policy_reward(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    return np.einsum("sa,sa->s", policy, mdp.rewards)


def exact_policy_value(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Fixed-point iteration of V = r_pi + gamma P_pi V to sup-norm residual
    below 1e-12."""
    policy = validate_policy(mdp, policy)
    p_pi = policy_transition(mdp, policy)
    r_pi = policy_reward(mdp, policy)
    v = np.zeros(mdp.n_states)
    while True:
        v_next = r_pi + mdp.gamma * (p_pi @ v)
        if np.max(np.abs(v_next - v)) < VALUE_TOL:
            return v_next
        v = v_next


def action_values(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """Q(s, a) = r(s, a) + gamma * sum_s' P(s'|s,a) V(s')."""
    return mdp.rewards + mdp.gamma * np.einsum("sat,t->sa", mdp.transitions, v)


def discounted_visitation(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Normalized discounted state occupancy, solved exactly:
    d = (1 - gamma) * (I - gamma * P_pi^T)^-1 rho0."""
    p_pi = policy_transition(mdp, policy)
    eye = np.eye(mdp.n_states)
    d = (1.0 - mdp.gamma) * np.linalg.solve(eye - mdp.gamma * p_pi.T, mdp.initial_dist)
    return d


def greedy_projection(policy: np.ndarray) -> np.ndarray:
    """One-hot rows at each state's argmax (ties break to the lowest index)."""
    out = np.zeros_like(policy)
    out[np.arange(policy.shape[0]), np.argmax(policy, axis=1)] = 1.0
    return out


@dataclass
class MixedPolicyResult:
    mixed: np.ndarray
    omega: float
    intervened: np.ndarray       # (S,) bool
    d_mix: np.ndarray
    q_teacher: np.ndarray


def build_mixed_policy(teacher: np.ndarray, student: np.ndarray, mdp: TabularMdp,
                       tolerance: float) -> MixedPolicyResult:
    """Apply the Q-gap switch state by state using the teacher's exact
    action values: the teacher's row replaces the student's wherever
    Q_t(s, argmax teacher) - Q_t(s, argmax student) exceeds the tolerance.
    omega is the intervened-state mass under the mixed policy's discounted
    visitation."""
    teacher = validate_policy(mdp, teacher)
    student = validate_policy(mdp, student)
    v_teacher = exact_policy_value(mdp, teacher)
    q_teacher = action_values(mdp, v_teacher)

    a_t = np.argmax(teacher, axis=1)
    a_s = np.argmax(student, axis=1)
    states = np.arange(mdp.n_states)
    gap = q_teacher[states, a_t] - q_teacher[states, a_s]
    intervened = gap > tolerance

    mixed = np.where(intervened[:, None], teacher, student)
    d_mix = discounted_visitation(mdp, mixed)
    # float summation can drift a hair past 1; omega is a probability mass
    omega = float(np.clip(d_mix[intervened].sum(), 0.0, 1.0))
    return MixedPolicyResult(mixed=mixed, omega=omega, intervened=intervened,
                             d_mix=d_mix, q_teacher=q_teacher)


@dataclass
class ImprovementReport:
    margin: float                # J_mix - J_teacher (greedy representatives)
    j_mix: float
    j_teacher: float
    omega: float
    pointwise_min_margin: float


def check_mixed_policy_improvement(mdp: TabularMdp, teacher: np.ndarray,
                                   student: np.ndarray,
                                   tolerance: float = 0.0) -> ImprovementReport:
    """Certify that switching cannot hurt the teacher's return.

    The guarantee's premise is greedy selection on exact Q values, so both
    policies are projected to their deterministic representatives before
    mixing. At zero tolerance the mixed action at every state has teacher-Q
    at least the teacher's own, which is classical policy improvement.
    """
    t_greedy = greedy_projection(validate_policy(mdp, teacher))
    s_greedy = greedy_projection(validate_policy(mdp, student))
    result = build_mixed_policy(t_greedy, s_greedy, mdp, tolerance)
    v_mix = exact_policy_value(mdp, result.mixed)
    v_teacher = exact_policy_value(mdp, t_greedy)
    j_mix = float(mdp.initial_dist @ v_mix)
    j_teacher = float(mdp.initial_dist @ v_teacher)
    return ImprovementReport(
        margin=j_mix - j_teacher, j_mix=j_mix, j_teacher=j_teacher,
        omega=result.omega,
        pointwise_min_margin=float(np.min(v_mix - v_teacher)),
    )


@dataclass
class BoundReport:
    lhs: float                   # |J_mix - J_teacher|
    rhs: float                   # bound value
    slack: float                 # rhs - lhs
    j_mix: float
    j_teacher: float
    omega: float
    avg_teacher_entropy: float   # H under d_mix
    kappa: float                 # H minus the average KL (reporting only)
    visitation_mass: float       # sum of d_mix, should be 1


def check_performance_bound(mdp: TabularMdp, teacher: np.ndarray, student: np.ndarray,
                            tolerance: float = 0.0) -> BoundReport:
    """Evaluate both sides of the mixed-vs-teacher return bound exactly.

    The right-hand side uses the computable expectation of sqrt(KL) under
    the mixed policy's visitation; the entropy form substitutes
    KL = H - kappa, so kappa is reported but carries no independent content.
    """
    teacher = validate_policy(mdp, teacher)
    student = validate_policy(mdp, student)
    result = build_mixed_policy(teacher, student, mdp, tolerance)

    v_mix = exact_policy_value(mdp, result.mixed)
    v_teacher = exact_policy_value(mdp, teacher)
    j_mix = float(mdp.initial_dist @ v_mix)
    j_teacher = float(mdp.initial_dist @ v_teacher)
    lhs = abs(j_mix - j_teacher)

    s_floor = np.maximum(student, 1e-12)
    kl_per_state = np.where(teacher > 0,
                            teacher * (np.log(np.maximum(teacher, 1e-300)) - np.log(s_floor)),
                            0.0).sum(axis=1)
    expected_sqrt_kl = float(result.d_mix @ np.sqrt(np.maximum(kl_per_state, 0.0)))
    rhs = (np.sqrt(2.0) * (1.0 - result.omega) * mdp.r_max
           / (1.0 - mdp.gamma) ** 2 * expected_sqrt_kl)

    entropy_per_state = -np.where(teacher > 0,
                                  teacher * np.log(np.maximum(teacher, 1e-300)),
                                  0.0).sum(axis=1)
    avg_entropy = float(result.d_mix @ entropy_per_state)
    avg_kl = float(result.d_mix @ kl_per_state)

    return BoundReport(
        lhs=lhs, rhs=float(rhs), slack=float(rhs - lhs),
        j_mix=j_mix, j_teacher=j_teacher, omega=result.omega,
        avg_teacher_entropy=avg_entropy, kappa=avg_entropy - avg_kl,
        visitation_mass=float(result.d_mix.sum()),
    )


def random_mdp(rng: np.random.Generator, max_states: int = 20,
               max_actions: int = 4) -> TabularMdp:
    """Dirichlet(1) transition rows, uniform rewards in [-1, 1]."""
    n_s = int(rng.integers(min(2, max_states), max_states + 1))
    n_a = int(rng.integers(2, max_actions + 1))
    transitions = rng.dirichlet(np.ones(n_s), size=(n_s, n_a))
    rewards = rng.uniform(-1.0, 1.0, size=(n_s, n_a))
    gamma = float(rng.uniform(0.8, 0.95))
    initial = rng.dirichlet(np.ones(n_s))
    return TabularMdp(transitions=transitions, rewards=rewards, gamma=gamma,
                      initial_dist=initial)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int,
                  deterministic: bool = False) -> np.ndarray:
    if deterministic:
        policy = np.zeros((n_states, n_actions))
        policy[np.arange(n_states), rng.integers(0, n_actions, size=n_states)] = 1.0
        return policy
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def optimal_policy(mdp: TabularMdp) -> np.ndarray:
    """Greedy policy from value iteration (used as the strong-teacher oracle)."""
    v = np.zeros(mdp.n_states)
    while True:
        q = action_values(mdp, v)
        v_next = q.max(axis=1)
        if np.max(np.abs(v_next - v)) < VALUE_TOL:
            break
        v = v_next
    policy = np.zeros((mdp.n_states, mdp.n_actions))
    policy[np.arange(mdp.n_states), np.argmax(action_values(mdp, v), axis=1)] = 1.0
    return policy


def run_sweep(n_instances: int = 100, seed: int = 0, max_states: int = 20,
              max_actions: int = 4, tolerance: float = 0.0) -> tuple[list[dict], bool]:
    """Random-instance certification sweep.

    Every instance draws an MDP plus stochastic teacher/student tables; the
    improvement check internally uses their greedy representatives. Returns
    per-instance report rows and an overall pass flag (improvement margin
    >= -1e-9 and bound slack >= 0 everywhere).
    """
    rng = np.random.default_rng(seed)
    rows = []
    all_pass = True
    for k in range(n_instances):
        mdp = random_mdp(rng, max_states=max_states, max_actions=max_actions)
        teacher = random_policy(rng, mdp.n_states, mdp.n_actions)
        student = random_policy(rng, mdp.n_states, mdp.n_actions)
        bound = check_performance_bound(mdp, teacher, student, tolerance)
        improv = check_mixed_policy_improvement(mdp, teacher, student, tolerance)
        ok = improv.margin >= -1e-9 and bound.slack >= 0.0
        all_pass = all_pass and ok
        rows.append({
            "instance": k,
            "n_states": mdp.n_states,
            "n_actions": mdp.n_actions,
            "gamma": mdp.gamma,
            "J_teacher": bound.j_teacher,
            "J_mix": bound.j_mix,
            "omega": bound.omega,
            "bound_lhs": bound.lhs,
            "bound_rhs": bound.rhs,
            "slack": bound.slack,
            "improvement_margin": improv.margin,
            "visitation_mass": bound.visitation_mass,
            "pass": ok,
        })
    return rows, all_pass
