import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relproxy import loss as L
from relproxy import tensor as T
from relproxy.model import RepTriple
from relproxy.tensor import Tensor

import oracles


def _reps(rng, B, d, grad=False):
    return RepTriple(*(Tensor(rng.normal(size=(B, d)), requires_grad=grad) for _ in range(3)))


def _omegas(reps):
    return [[reps.z_g.data[i], reps.z_L.data[i], reps.r.data[i]] for i in range(reps.z_g.shape[0])]


def _single(w):
    """A batch of one instance with a single representation."""
    t = Tensor(np.array([w], dtype=float))
    return RepTriple(t, t, t)


def test_cosine_examples():
    assert L.cosine_sim([1, 0], [0, 1]) == 0.0
    assert L.cosine_sim([1, 2], [2, 4]) == pytest.approx(1.0, abs=1e-15)
    assert L.cosine_sim([1, 0], [-1, 0]) == -1.0
    with pytest.raises(ZeroDivisionError):
        L.cosine_sim([0, 0], [1, 0])


def test_hand_computed_ln2_positive_case():
    delta = 0.1
    # cosine with the only proxy equals delta
    w = [delta, math.sqrt(1 - delta**2)]
    loss = L.rproxy_loss(_single(w), [0], Tensor([[1.0, 0.0]]), L.LossConfig(32.0, delta), use=("z_g",))
    assert loss.item() == pytest.approx(math.log(2), rel=1e-12)


def test_hand_computed_ln2_negative_case():
    delta = 0.1
    w = [-delta, math.sqrt(1 - delta**2)]
    proxies = Tensor([[1.0, 0.0], [0.0, -1.0]])
    # proxy 0 sees one negative at s = -delta (psi- = 2); proxy 1 holds the positive
    loss = L.rproxy_loss(_single(w), [1], proxies, L.LossConfig(32.0, delta), use=("z_g",)).item()
    s1 = -math.sqrt(1 - delta**2)
    expected = 0.5 * (math.log(2) + math.log(1 + math.exp(-32 * (s1 - delta))))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_single_negative_contributes_ln2():
    delta = 0.1
    w = [-delta, math.sqrt(1 - delta**2)]
    omegas = [[w]]
    assert oracles.proxy_loss(omegas, [1], [[1.0, 0.0], [0.0, -1.0]], 32.0, delta) == pytest.approx(
        L.rproxy_loss(_single(w), [1], Tensor([[1.0, 0.0], [0.0, -1.0]]), L.LossConfig(32.0, delta),
                      use=("z_g",)).item(), rel=1e-12)


def test_hand_computed_two_class_case():
    loss = L.rproxy_loss(_single([1.0, 0.0]), [0], Tensor(np.eye(2)), L.LossConfig(1.0, 0.0), use=("z_g",))
    expected = 0.5 * (math.log(1 + math.exp(-1)) + math.log(2))
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    assert loss.item() == pytest.approx(0.503204, abs=5e-7)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_straight_line_oracle(seed):
    rng = np.random.default_rng(seed)
    B, d, c = 5, 6, 3
    reps = _reps(rng, B, d)
    labels = rng.integers(0, c, size=B)
    P = rng.normal(size=(c, d))
    cfg = L.LossConfig(float(rng.uniform(1, 32)), float(rng.uniform(0, 0.5)))
    got = L.rproxy_loss(reps, labels, Tensor(P), cfg).item()
    want = oracles.proxy_loss(_omegas(reps), labels, P, cfg.alpha, cfg.delta)
    assert abs(got - want) / abs(want) < 1e-10


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    reps = _reps(rng, 4, 5, grad=True)
    P = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    labels = np.array([0, 1, 2, 1])
    fn = lambda: L.rproxy_loss(reps, labels, P, L.LossConfig(4.0, 0.1))
    assert T.grad_check(fn, [reps.z_g, reps.z_L, reps.r, P]) < 1e-4


def test_loss_errors():
    rng = np.random.default_rng(0)
    reps = _reps(rng, 2, 4)
    P = Tensor(rng.normal(size=(2, 4)))
    with pytest.raises(L.LossError):
        L.rproxy_loss(reps, [0, 2], P)
    with pytest.raises(L.LossError):
        L.rproxy_loss(reps, [0], P)
    with pytest.raises(L.LossError):
        L.LossConfig(alpha=0.0)
    with pytest.raises(L.LossError):
        L.LossConfig(delta=1.0)
    bad = RepTriple(Tensor([[np.nan, 1.0, 0.0, 0.0]]), *(Tensor(np.ones((1, 4))),) * 2)
    with pytest.raises((T.NonFiniteError, ZeroDivisionError)):
        L.rproxy_loss(bad, [0], P)


def _vector(w):
    t = Tensor(np.array(w, dtype=float))
    return RepTriple(t, t, t)


def test_inference_score_examples():
    P = Tensor(np.eye(2))
    e = math.e
    got = L.inference_scores(_vector([1.0, 0.0]), P)
    np.testing.assert_allclose(got, [3 * e / (e + 1), 3 / (e + 1)], rtol=1e-12)
    assert got == pytest.approx([2.193176, 0.806824], abs=1e-6)
    assert int(L.predict(_vector([1.0, 0.0]), P)) == 0
    # equidistant from every proxy
    sym = L.inference_scores(_vector([1.0, 1.0]), P)
    np.testing.assert_allclose(sym, [1.5, 1.5], rtol=1e-12)
    np.testing.assert_allclose(L.inference_scores(_vector([1.0, 0.0]), Tensor(2 * np.eye(2))), got, rtol=1e-15)


def test_inference_scores_match_oracle():
    rng = np.random.default_rng(3)
    reps = _reps(rng, 4, 5)
    P = rng.normal(size=(3, 5))
    got = L.inference_scores(reps, Tensor(P))
    for i, om in enumerate(_omegas(reps)):
        np.testing.assert_allclose(got[i], oracles.scores(om, P), rtol=1e-12)
    np.testing.assert_allclose(got.sum(axis=1), 3.0, rtol=1e-12)


def test_ablation_examples():
    rng = np.random.default_rng(1)
    labels = np.array([0, 1, 2])
    logits = Tensor(10.0 * np.eye(3)[labels] * 10)
    assert L.cross_entropy(logits, labels).item() < 1e-10
    # identical same-class distances -> zero huber residual
    z = Tensor(rng.normal(size=(1, 4)))
    reps = RepTriple(Tensor(np.vstack([z.data, z.data])), Tensor(np.vstack([z.data + 1, z.data + 1])),
                     Tensor(rng.normal(size=(2, 4))))
    assert L.huber_relation_term(reps, [0, 0]).item() == 0.0
    # identical r across distinct labels -> margin^2 per pair
    r = np.tile(rng.normal(size=(1, 4)), (3, 1))
    reps = RepTriple(Tensor(r), Tensor(r), Tensor(r))
    assert L.pairwise_contrastive_term(reps, [0, 1, 2]).item() == pytest.approx(0.25, rel=1e-12)
    # no same-class pair -> huber term contributes 0
    assert L.huber_relation_term(reps, [0, 1, 2]).item() == 0.0
    with pytest.raises(L.LossError):
        L.ablation_loss("nonsense", reps, [0, 1, 2], logits)


def test_ablation_losses_add_terms_to_cross_entropy():
    rng = np.random.default_rng(4)
    reps = _reps(rng, 4, 3)
    labels = np.array([0, 0, 1, 1])
    logits = Tensor(rng.normal(size=(4, 2)))
    ce = L.cross_entropy(logits, labels).item()
    assert L.ablation_loss("ce_head", reps, labels, logits).item() == pytest.approx(ce, rel=1e-15)
    assert L.ablation_loss("huber_relation", reps, labels, logits).item() == pytest.approx(
        ce + L.huber_relation_term(reps, labels).item(), rel=1e-12)
    assert L.ablation_loss("pairwise_contrastive", reps, labels, logits).item() == pytest.approx(
        ce + L.pairwise_contrastive_term(reps, labels).item(), rel=1e-12)


@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_loss_is_permutation_invariant_over_batch(seed, perm):
    rng = np.random.default_rng(seed)
    reps = _reps(rng, 5, 4)
    labels = rng.integers(0, 3, size=5)
    P = Tensor(rng.normal(size=(3, 4)))
    perm = np.array(perm)
    shuffled = RepTriple(*(Tensor(getattr(reps, n).data[perm]) for n in L.OMEGA))
    a = L.rproxy_loss(reps, labels, P).item()
    b = L.rproxy_loss(shuffled, labels[perm], P).item()
    assert b == pytest.approx(a, rel=1e-12)


@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(0.1, 10))
def test_scores_invariant_to_positive_rescaling(seed, lam, mu):
    rng = np.random.default_rng(seed)
    reps = _reps(rng, 3, 4)
    P = rng.normal(size=(3, 4))
    row = int(rng.integers(3))
    P2 = P.copy()
    P2[row] *= lam
    scaled = RepTriple(*(Tensor(mu * getattr(reps, n).data) for n in L.OMEGA))
    np.testing.assert_allclose(L.inference_scores(scaled, Tensor(P2)), L.inference_scores(reps, Tensor(P)),
                               rtol=1e-10)


@given(st.integers(0, 10_000), st.floats(1e-3, 0.05))
def test_loss_monotone_in_similarity(seed, step):
    """Raising s(omega, true proxy) lowers the loss; raising s(omega, wrong proxy) raises it.

    With a single omega, rotating one proxy row towards it changes exactly one similarity.
    """
    rng = np.random.default_rng(seed)
    d = 4
    w = rng.normal(size=d)
    P = rng.normal(size=(2, d))
    cfg = L.LossConfig(8.0, 0.1)

    def loss_and_sim(P_, row):
        reps = _single(w)
        return (L.rproxy_loss(reps, [0], Tensor(P_), cfg, use=("z_g",)).item(),
                L.cosine_sim(w, P_[row]))

    for row, sign in ((0, -1), (1, 1)):
        p = P[row] / np.linalg.norm(P[row])
        u = w / np.linalg.norm(w)
        if abs(p @ u) > 0.999:
            continue
        moved = P.copy()
        moved[row] = p + step * (u - (u @ p) * p)
        before, s0 = loss_and_sim(P, row)
        after, s1 = loss_and_sim(moved, row)
        assert s1 > s0
        assert np.sign(after - before) == sign
