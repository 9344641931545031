"""Feature augmenter: forward path, losses, gradients, trainer, checkpoint.

The reference computations here are written with explicit python loops
(math.erf, per-head index arithmetic) so they share no array plumbing
with the library implementation.
"""

import math

import numpy as np
import pytest

from conftest import unit_rows

from retaug.augmenter import (
    AugmenterParams,
    LayerParams,
    RafBatch,
    RafHyperParams,
    augment,
    augment_batch,
    aux_logits,
    build_M,
    decoder_forward,
    finite_difference_grads,
    init_params,
    load_checkpoint,
    max_relative_error,
    pseudo_label,
    pseudo_labels,
    raf_grad,
    raf_loss,
    save_checkpoint,
    train,
)
from retaug.augmenter import _build_m_batch, _decoder_batch, _loss_terms
from retaug.concepts import RetrievedConcepts
from retaug.errors import (
    DivergenceDetected,
    FormatError,
    NonFiniteIntermediate,
    ShapeMismatch,
)
from retaug.store import build_table


def tiny_hp(**kw):
    base = dict(k=3, layers=2, heads=2, ffn_dim=16)
    base.update(kw)
    return RafHyperParams(**base)


def make_retrieved(rng, k, dim):
    H = unit_rows(rng, k, dim)
    return RetrievedConcepts(
        embeddings=H,
        scores=rng.uniform(0.1, 0.9, size=k),
        texts=tuple(f"c{i}" for i in range(k)),
        indices=np.arange(k),
    )


def make_batch(rng, n, k, dim):
    return RafBatch(
        visual_features=unit_rows(rng, n, dim),
        concept_embeddings=unit_rows(rng, n * k, dim).reshape(n, k, dim),
        concept_scores=rng.uniform(0.1, 0.9, size=(n, k)),
    )


def zero_decoder_output(params):
    """Kill every path that could perturb the residual stream."""
    for layer in params.layers:
        layer.w_o[...] = 0.0
        layer.ffn_w2[...] = 0.0
        layer.ffn_b2[...] = 0.0
    return params


def identity_params(dim, hp):
    p = zero_decoder_output(init_params(dim, hp, seed=0))
    p.query_seed[...] = 0.0
    p.proj_w[...] = np.eye(dim)
    p.proj_b[...] = 0.0
    return p


def make_task(rng, dim=8, n_cats=4, n_props=32, k=3, noise=0.15):
    """Clustered proposals around category directions, random concepts."""
    cats = unit_rows(rng, n_cats, dim)
    table = build_table([f"cat_{i}" for i in range(n_cats)], cats)
    assign = rng.integers(0, n_cats, size=n_props)
    v = cats[assign] + noise * rng.normal(size=(n_props, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    batch = RafBatch(
        v,
        unit_rows(rng, n_props * k, dim).reshape(n_props, k, dim),
        rng.uniform(0.1, 0.9, size=(n_props, k)),
    )
    return batch, table


# --------------------------------------------------------------------------
# loop-based references
# --------------------------------------------------------------------------


def ref_softmax(xs):
    top = max(xs)
    es = [math.exp(x - top) for x in xs]
    z = sum(es)
    return [e / z for e in es]


def ref_gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def ref_build_m(v, H, s, params):
    k, d = H.shape
    w = ref_softmax(list(s))
    rows = [[v[j] + params.type0[j] for j in range(d)]]
    for i in range(k):
        rows.append(
            [w[i] * H[i][j] + params.pos_embed[i][j] + params.type1[j] for j in range(d)]
        )
    return np.array(rows)


def ref_augment(v, H, s, params):
    d = params.dim
    h, dh = params.heads, d // params.heads
    n_keys = H.shape[0] + 1
    m = ref_build_m(v, H, s, params)
    q = [float(x) for x in params.query_seed]
    for layer in params.layers:
        qp = [sum(q[a] * layer.w_q[a][c] for a in range(d)) for c in range(d)]
        kp = [[sum(m[r][a] * layer.w_k[a][c] for a in range(d)) for c in range(d)]
              for r in range(n_keys)]
        vp = [[sum(m[r][a] * layer.w_v[a][c] for a in range(d)) for c in range(d)]
              for r in range(n_keys)]
        ctx = [0.0] * d
        for head in range(h):
            cols = range(head * dh, (head + 1) * dh)
            logits = [
                sum(qp[c] * kp[r][c] for c in cols) / math.sqrt(dh)
                for r in range(n_keys)
            ]
            attn = ref_softmax(logits)
            for c in cols:
                ctx[c] = sum(attn[r] * vp[r][c] for r in range(n_keys))
        q_mid = [q[c] + sum(ctx[a] * layer.w_o[a][c] for a in range(d)) for c in range(d)]
        u = [
            sum(q_mid[a] * layer.ffn_w1[a][j] for a in range(d)) + layer.ffn_b1[j]
            for j in range(params.ffn_dim)
        ]
        act = [ref_gelu(x) for x in u]
        q = [
            q_mid[c]
            + sum(act[j] * layer.ffn_w2[j][c] for j in range(params.ffn_dim))
            + layer.ffn_b2[c]
            for c in range(d)
        ]
    coarse = [
        sum(v[a] * params.proj_w[a][c] for a in range(d)) + params.proj_b[c]
        for c in range(d)
    ]
    raw = [coarse[c] + q[c] for c in range(d)]
    norm = math.sqrt(sum(x * x for x in raw))
    return np.array([x / norm for x in raw])


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


class TestInit:
    def test_seed_determinism(self):
        a = init_params(8, tiny_hp(), seed=3)
        b = init_params(8, tiny_hp(), seed=3)
        for (_, ta), (_, tb) in zip(a.tensors(), b.tensors()):
            np.testing.assert_array_equal(ta, tb)

    def test_seeds_differ(self):
        a = init_params(8, tiny_hp(), seed=3)
        b = init_params(8, tiny_hp(), seed=4)
        assert np.any(a.proj_w != b.proj_w)

    def test_weight_bounds_and_zero_biases(self):
        p = init_params(8, tiny_hp(ffn_dim=32), seed=0)
        assert np.all(np.abs(p.proj_w) <= 1.0 / np.sqrt(8))
        layer = p.layers[0]
        assert np.all(np.abs(layer.ffn_w1) <= 1.0 / np.sqrt(8))
        assert np.all(np.abs(layer.ffn_w2) <= 1.0 / np.sqrt(32))
        np.testing.assert_array_equal(p.proj_b, 0.0)
        np.testing.assert_array_equal(layer.ffn_b1, 0.0)
        np.testing.assert_array_equal(layer.ffn_b2, 0.0)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ShapeMismatch):
            init_params(9, tiny_hp(heads=2), seed=0)

    def test_validate_catches_bad_shapes(self):
        p = init_params(8, tiny_hp(), seed=0)
        p.validate()
        p.pos_embed = p.pos_embed[:2]
        with pytest.raises(ShapeMismatch, match="pos_embed"):
            p.validate()

    def test_hyperparam_validation(self):
        with pytest.raises(ValueError):
            RafHyperParams(k=0)
        with pytest.raises(ValueError):
            RafHyperParams(activation="tanh")

    def test_parameter_count(self):
        p = init_params(8, tiny_hp(), seed=0)
        per_layer = 4 * 8 * 8 + 8 * 16 + 16 + 16 * 8 + 8
        expected = (8 * 8 + 8) + 2 * per_layer + 8 + 3 * 8 + 2 * 8
        assert p.n_parameters() == expected


# --------------------------------------------------------------------------
# key/value matrix
# --------------------------------------------------------------------------


class TestBuildM:
    def test_single_concept_softmax_is_one(self, rng):
        p = init_params(4, tiny_hp(k=1, heads=1), seed=0)
        r = make_retrieved(rng, 1, 4)
        v = unit_rows(rng, 1, 4)[0]
        m = build_M(v, r, p)
        assert m.shape == (2, 4)
        np.testing.assert_allclose(m[0], v + p.type0, atol=1e-12)
        np.testing.assert_allclose(
            m[1], r.embeddings[0] + p.pos_embed[0] + p.type1, atol=1e-12
        )

    def test_equal_scores_halve_concept_rows(self, rng):
        p = init_params(4, tiny_hp(k=2, heads=1), seed=0)
        p.pos_embed[...] = 0.0
        p.type0[...] = 0.0
        p.type1[...] = 0.0
        H = unit_rows(rng, 2, 4)
        r = RetrievedConcepts(H, np.array([0.7, 0.7]), ("a", "b"), np.arange(2))
        m = build_M(unit_rows(rng, 1, 4)[0], r, p)
        np.testing.assert_allclose(m[1:], H / 2.0, atol=1e-12)

    def test_matches_loop_reference(self, rng):
        p = init_params(8, tiny_hp(k=3, heads=2), seed=5)
        r = make_retrieved(rng, 3, 8)
        v = unit_rows(rng, 1, 8)[0]
        np.testing.assert_allclose(
            build_M(v, r, p), ref_build_m(v, r.embeddings, r.scores, p), atol=1e-12
        )

    def test_score_weights_sum_to_one(self, rng):
        p = init_params(8, tiny_hp(k=5, heads=2), seed=0)
        batch = make_batch(rng, 6, 5, 8)
        _, weights = _build_m_batch(
            batch.visual_features, batch.concept_embeddings, batch.concept_scores, p
        )
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)

    def test_shape_errors(self, rng):
        p = init_params(8, tiny_hp(k=3, heads=2), seed=0)
        r = make_retrieved(rng, 2, 8)  # k mismatch against pos_embed
        with pytest.raises(ShapeMismatch):
            build_M(unit_rows(rng, 1, 8)[0], r, p)


# --------------------------------------------------------------------------
# decoder
# --------------------------------------------------------------------------


class TestDecoder:
    def test_zeroed_updates_return_query_seed(self, rng):
        p = zero_decoder_output(init_params(8, tiny_hp(), seed=1))
        for _ in range(5):
            m = rng.normal(size=(4, 8))
            np.testing.assert_array_equal(decoder_forward(m, p), p.query_seed)

    def test_hand_two_key_attention(self):
        eye = np.eye(2)
        layer = LayerParams(
            w_q=eye.copy(), w_k=eye.copy(), w_v=eye.copy(), w_o=eye.copy(),
            ffn_w1=np.zeros((2, 2)), ffn_b1=np.zeros(2),
            ffn_w2=np.zeros((2, 2)), ffn_b2=np.zeros(2),
        )
        p = AugmenterParams(
            dim=2, ffn_dim=2, heads=1, k=1, activation="gelu",
            proj_w=eye.copy(), proj_b=np.zeros(2), layers=[layer],
            query_seed=np.array([1.0, 0.0]), pos_embed=np.zeros((1, 2)),
            type0=np.zeros(2), type1=np.zeros(2),
        )
        m = np.array([[1.0, 0.0], [0.0, 1.0]])
        # identity projections: logits = [1/sqrt(2), 0], values = key rows
        s = 1.0 / math.sqrt(2.0)
        a0 = math.exp(s) / (math.exp(s) + 1.0)
        expected = np.array([1.0 + a0, 1.0 - a0])
        np.testing.assert_allclose(decoder_forward(m, p), expected, atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        p = init_params(8, tiny_hp(k=4, heads=4), seed=2)
        batch = make_batch(rng, 5, 4, 8)
        m, _ = _build_m_batch(
            batch.visual_features, batch.concept_embeddings, batch.concept_scores, p
        )
        _, caches = _decoder_batch(m, p)
        assert len(caches) == 2
        for cache in caches:
            np.testing.assert_allclose(cache["attn"].sum(axis=-1), 1.0, atol=1e-9)

    def test_full_scale_geometry_stays_bounded(self, rng):
        p = init_params(512, RafHyperParams(k=50, layers=6, heads=8, ffn_dim=2048), seed=0)
        batch = make_batch(rng, 4, 50, 512)
        m, _ = _build_m_batch(
            batch.visual_features, batch.concept_embeddings, batch.concept_scores, p
        )
        for row in m:
            out = decoder_forward(row, p)
            assert np.all(np.isfinite(out))
            assert np.linalg.norm(out) <= 10.0

    def test_rejects_wrong_width(self, rng):
        p = init_params(8, tiny_hp(), seed=0)
        with pytest.raises(ShapeMismatch):
            decoder_forward(rng.normal(size=(4, 6)), p)

    def test_overflow_is_reported(self, rng):
        p = init_params(4, tiny_hp(k=1, heads=1), seed=0)
        m = np.full((2, 4), 1e200)
        with np.errstate(all="ignore"), pytest.raises(NonFiniteIntermediate):
            decoder_forward(m, p)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


class TestAugment:
    def test_identity_path_returns_input(self, rng):
        p = identity_params(8, tiny_hp())
        r = make_retrieved(rng, 3, 8)
        v = unit_rows(rng, 1, 8)[0]
        np.testing.assert_allclose(augment(v, r, p), v, atol=1e-9)

    def test_matches_loop_reference(self, rng):
        p = init_params(6, tiny_hp(k=3, heads=2, ffn_dim=7), seed=9)
        r = make_retrieved(rng, 3, 6)
        v = unit_rows(rng, 1, 6)[0]
        got = augment(v, r, p)
        want = ref_augment(v, r.embeddings, r.scores, p)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_output_is_unit_norm(self, rng):
        p = init_params(8, tiny_hp(), seed=4)
        batch = make_batch(rng, 16, 3, 8)
        out = augment_batch(batch, p)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_batch_agrees_with_single(self, rng):
        p = init_params(8, tiny_hp(), seed=4)
        batch = make_batch(rng, 5, 3, 8)
        out = augment_batch(batch, p)
        for i in range(5):
            r = RetrievedConcepts(
                batch.concept_embeddings[i], batch.concept_scores[i],
                ("x",) * 3, np.arange(3),
            )
            np.testing.assert_allclose(
                out[i], augment(batch.visual_features[i], r, p), atol=1e-12
            )

    def test_concept_permutation_with_positions_is_invisible(self, rng):
        p = init_params(8, tiny_hp(k=4, heads=2), seed=6)
        r = make_retrieved(rng, 4, 8)
        v = unit_rows(rng, 1, 8)[0]
        base = augment(v, r, p)
        perm = rng.permutation(4)
        p2 = p.copy()
        p2.pos_embed[...] = p.pos_embed[perm]
        r2 = RetrievedConcepts(
            r.embeddings[perm], r.scores[perm],
            tuple(r.texts[i] for i in perm), r.indices[perm],
        )
        np.testing.assert_allclose(augment(v, r2, p2), base, atol=1e-12)

    def test_zero_feature_on_identity_path_is_reported(self, rng):
        p = identity_params(4, tiny_hp(k=2, heads=2))
        r = make_retrieved(rng, 2, 4)
        with pytest.raises(NonFiniteIntermediate):
            augment(np.zeros(4), r, p)

    def test_nonuniform_k_rejected(self, rng):
        a = make_retrieved(rng, 3, 8)
        b = make_retrieved(rng, 4, 8)
        with pytest.raises(ShapeMismatch):
            RafBatch.from_retrieved(unit_rows(rng, 2, 8), [a, b])


# --------------------------------------------------------------------------
# logits and labels
# --------------------------------------------------------------------------


class TestLogitsAndLabels:
    def test_category_row_scores_one(self, rng):
        table = build_table([f"c{i}" for i in range(5)], unit_rows(rng, 5, 8))
        logits = aux_logits(table.vectors[2], table)
        assert logits[2] == pytest.approx(1.0, abs=1e-9)
        assert np.argmax(logits) == 2

    def test_orthogonal_feature_scores_zero(self):
        table = build_table(["x", "y"], np.eye(3)[:2])
        np.testing.assert_allclose(aux_logits(np.array([0.0, 0.0, 1.0]), table), 0.0)

    def test_matches_matvec_oracle(self, rng):
        table = build_table([f"c{i}" for i in range(7)], unit_rows(rng, 7, 6))
        v = unit_rows(rng, 1, 6)[0]
        want = [float(np.dot(table.vectors[i], v)) for i in range(7)]
        np.testing.assert_allclose(aux_logits(v, table), want, atol=1e-12)

    def test_dim_mismatch(self, rng):
        table = build_table(["a"], unit_rows(rng, 1, 4))
        with pytest.raises(ShapeMismatch):
            aux_logits(np.ones(5), table)

    def test_pseudo_label_recovers_exact_row(self, rng):
        table = build_table([f"c{i}" for i in range(9)], unit_rows(rng, 9, 8))
        assert pseudo_label(table.vectors[7], table) == 7

    def test_pseudo_label_tie_takes_lowest_index(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        # rows 0 and 2 coincide; query matches both
        table = build_table(["a", "b", "c"], rows)
        assert pseudo_label(np.array([1.0, 0.0]), table) == 0

    def test_pseudo_labels_match_scan_oracle(self, rng):
        table = build_table([f"c{i}" for i in range(6)], unit_rows(rng, 6, 5))
        feats = unit_rows(rng, 20, 5)
        got = pseudo_labels(feats, table)
        for i in range(20):
            sims = [float(np.dot(table.vectors[c], feats[i])) for c in range(6)]
            best = max(range(6), key=lambda c: (sims[c], -c))
            assert got[i] == best


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


class TestLoss:
    def test_identity_path_has_zero_reg(self, rng):
        p = identity_params(8, tiny_hp())
        batch = make_batch(rng, 6, 3, 8)
        table = build_table([f"c{i}" for i in range(4)], unit_rows(rng, 4, 8))
        result = raf_loss(batch, p, table, tiny_hp())
        assert result.reg == 0.0

    def test_cross_entropy_closed_form(self):
        # logits (ln 3, 0) with label 0: loss = -ln(3/4)
        table = build_table(["a", "b"], np.eye(2))
        state = {
            "v": np.array([[1.0, 0.0]]),
            "raw": np.array([[1.0, 0.0]]),
            "unit": np.array([[math.log(3.0), 0.0]]),
        }
        cls, reg, labels, probs, _ = _loss_terms(state, table)
        assert labels[0] == 0
        assert cls == pytest.approx(-math.log(3.0 / 4.0), abs=1e-12)
        assert reg == 0.0
        np.testing.assert_allclose(probs[0], [0.75, 0.25], atol=1e-12)

    def test_loss_is_weighted_sum(self, rng):
        p = init_params(8, tiny_hp(), seed=3)
        batch = make_batch(rng, 4, 3, 8)
        table = build_table([f"c{i}" for i in range(4)], unit_rows(rng, 4, 8))
        result = raf_loss(batch, p, table, tiny_hp(beta_cls=5.0, beta_reg=1.0))
        assert result.loss == pytest.approx(5.0 * result.cls + result.reg, rel=1e-12)
        doubled = raf_loss(batch, p, table, tiny_hp(beta_cls=10.0, beta_reg=3.0))
        assert doubled.loss == pytest.approx(10.0 * result.cls + 3.0 * result.reg, rel=1e-12)

    def test_identity_path_loss_closed_form(self, rng):
        # v_aug == v_r == category row 0, two orthogonal categories:
        # logits (1, 0), so cls = -ln(e/(e+1)) and reg = 0.
        p = identity_params(2, tiny_hp(k=2, heads=2))
        table = build_table(["a", "b"], np.eye(2))
        batch = RafBatch(
            np.array([[1.0, 0.0]]),
            unit_rows(rng, 2, 2).reshape(1, 2, 2),
            np.array([[0.5, 0.5]]),
        )
        result = raf_loss(batch, p, table, tiny_hp(k=2, heads=2))
        want_cls = -math.log(math.e / (math.e + 1.0))
        assert result.cls == pytest.approx(want_cls, abs=1e-9)
        assert result.loss == pytest.approx(5.0 * want_cls, abs=1e-8)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------


class TestGradients:
    def test_reg_gradient_of_proj_bias_by_hand(self, rng):
        # identity forward with bias b: raw - v = b, so d reg / d b = 2 b.
        # the same displacement flows through the query seed.
        hp = tiny_hp(k=2, heads=2, beta_cls=0.0, beta_reg=1.0)
        p = identity_params(2, hp)
        b = np.array([0.3, -0.2])
        p.proj_b[...] = b
        batch = RafBatch(
            unit_rows(rng, 3, 2),
            unit_rows(rng, 6, 2).reshape(3, 2, 2),
            rng.uniform(0.1, 0.9, size=(3, 2)),
        )
        table = build_table(["a", "b"], np.eye(2))
        result = raf_loss(batch, p, table, hp)
        assert result.reg == pytest.approx(float(b @ b), abs=1e-12)
        grads = raf_grad(batch, p, table, hp)
        np.testing.assert_allclose(grads.proj_b, 2.0 * b, atol=1e-12)
        np.testing.assert_allclose(grads.query_seed, 2.0 * b, atol=1e-12)

    def test_loss_is_linear_in_term_weights(self, rng):
        p = init_params(8, tiny_hp(), seed=11)
        batch = make_batch(rng, 4, 3, 8)
        table = build_table([f"c{i}" for i in range(5)], unit_rows(rng, 5, 8))
        g_cls = raf_grad(batch, p, table, tiny_hp(beta_cls=1.0, beta_reg=0.0))
        g_reg = raf_grad(batch, p, table, tiny_hp(beta_cls=0.0, beta_reg=1.0))
        g_mix = raf_grad(batch, p, table, tiny_hp(beta_cls=5.0, beta_reg=2.0))
        for (_, a), (_, c), (_, r) in zip(g_mix.tensors(), g_cls.tensors(), g_reg.tensors()):
            np.testing.assert_allclose(a, 5.0 * c + 2.0 * r, atol=1e-10)

    def test_zero_cls_weight_leaves_pure_reg_gradients(self, rng):
        p = init_params(8, tiny_hp(), seed=12)
        batch = make_batch(rng, 3, 3, 8)
        table = build_table([f"c{i}" for i in range(4)], unit_rows(rng, 4, 8))
        hp = tiny_hp(beta_cls=0.0, beta_reg=1.0)
        grads = raf_grad(batch, p, table, hp)
        fd = finite_difference_grads(
            lambda q: raf_loss(batch, q, table, hp).reg, p, step=1e-4
        )
        assert max_relative_error(grads, fd) < 1e-4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        task_rng = np.random.default_rng(seed)
        table = build_table(
            [f"c{i}" for i in range(6)], task_rng.normal(size=(6, 8))
        )
        v = task_rng.normal(size=(4, 8))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        H = task_rng.normal(size=(4, 3, 8))
        H /= np.linalg.norm(H, axis=2, keepdims=True)
        batch = RafBatch(v, H, task_rng.normal(size=(4, 3)))
        p = init_params(8, tiny_hp(), seed=seed)
        hp = tiny_hp()
        grads = raf_grad(batch, p, table, hp)
        fd = finite_difference_grads(
            lambda q: raf_loss(batch, q, table, hp).loss, p, step=1e-4
        )
        assert max_relative_error(grads, fd) < 1e-4

    def test_relu_gradients_check_too(self, rng):
        hp = tiny_hp(activation="relu")
        p = init_params(8, hp, seed=7)
        batch = make_batch(rng, 3, 3, 8)
        table = build_table([f"c{i}" for i in range(4)], unit_rows(rng, 4, 8))
        grads = raf_grad(batch, p, table, hp)
        fd = finite_difference_grads(
            lambda q: raf_loss(batch, q, table, hp).loss, p, step=1e-4
        )
        assert max_relative_error(grads, fd) < 1e-4


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class TestTrain:
    def test_zero_learning_rate_changes_nothing(self, rng):
        batch, table = make_task(rng, n_props=8)
        p = init_params(8, tiny_hp(), seed=7)
        before = p.copy()
        hp = tiny_hp(learning_rate=0.0, iterations=5)
        trained, trace = train([batch], p, table, hp)
        for (_, a), (_, b) in zip(trained.tensors(), before.tensors()):
            np.testing.assert_array_equal(a, b)
        losses = {loss for _, loss, _, _ in trace}
        assert len(losses) == 1

    def test_input_params_not_mutated(self, rng):
        batch, table = make_task(rng, n_props=8)
        p = init_params(8, tiny_hp(), seed=7)
        snapshot = p.copy()
        train([batch], p, table, tiny_hp(learning_rate=0.05, iterations=3))
        for (_, a), (_, b) in zip(p.tensors(), snapshot.tensors()):
            np.testing.assert_array_equal(a, b)

    def test_loss_decreases_on_small_task(self, rng):
        batch, table = make_task(rng)
        p = init_params(8, tiny_hp(), seed=7)
        _, trace = train([batch], p, table, tiny_hp(learning_rate=0.01, iterations=50))
        assert trace[-1][1] < trace[0][1]

    def test_round_robin_consumes_all_batches(self, rng):
        b1, table = make_task(rng, n_props=4)
        b2 = RafBatch(
            b1.visual_features[::-1].copy(),
            b1.concept_embeddings.copy(),
            b1.concept_scores.copy(),
        )
        p = init_params(8, tiny_hp(), seed=7)
        _, trace = train([b1, b2], p, table, tiny_hp(learning_rate=0.0, iterations=4))
        # constant parameters: the trace alternates between the two batch losses
        assert trace[0][1] == trace[2][1]
        assert trace[1][1] == trace[3][1]
        assert trace[0][1] != trace[1][1]

    def test_divergence_is_reported(self, rng):
        batch, table = make_task(rng, n_props=4)
        p = init_params(8, tiny_hp(), seed=7)
        with np.errstate(all="ignore"), pytest.raises(DivergenceDetected):
            train([batch], p, table, tiny_hp(learning_rate=1e6, iterations=200))

    def test_training_is_deterministic(self, rng):
        batch, table = make_task(rng, n_props=8)
        hp = tiny_hp(learning_rate=0.01, iterations=10)
        p1, t1 = train([batch], init_params(8, hp, seed=5), table, hp)
        p2, t2 = train([batch], init_params(8, hp, seed=5), table, hp)
        assert t1 == t2
        for (_, a), (_, b) in zip(p1.tensors(), p2.tensors()):
            np.testing.assert_array_equal(a, b)

    def test_single_proposal_reaches_plateau(self, rng):
        batch, table = make_task(rng, n_props=1)
        p = init_params(8, tiny_hp(), seed=7)
        hp = tiny_hp(learning_rate=0.05, iterations=500)
        _, trace = train([batch], p, table, hp)
        losses = [loss for _, loss, _, _ in trace]
        regs = [reg for _, _, _, reg in trace]
        assert losses[-1] < 0.45 * losses[0]
        # plateau: the last stretch is flat relative to the total descent
        tail_drop = losses[-100] - losses[-1]
        assert tail_drop < 0.02 * (losses[0] - losses[-1])
        assert regs[-1] < 0.05


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------


class TestCheckpoint:
    def test_round_trip_preserves_tensors(self, tmp_path):
        p = init_params(8, tiny_hp(), seed=13)
        path = tmp_path / "aug.ckpt"
        save_checkpoint(path, p)
        loaded = load_checkpoint(path)
        assert (loaded.dim, loaded.ffn_dim, loaded.heads, loaded.k) == (8, 16, 2, 3)
        assert len(loaded.layers) == 2
        for (name, a), (_, b) in zip(p.tensors(), loaded.tensors()):
            # storage is f32: loading returns the rounded values exactly
            np.testing.assert_array_equal(
                b, a.astype(np.float32).astype(np.float64), err_msg=name
            )

    def test_activation_is_configuration(self, tmp_path):
        p = init_params(8, tiny_hp(), seed=0)
        path = tmp_path / "aug.ckpt"
        save_checkpoint(path, p)
        assert load_checkpoint(path).activation == "gelu"
        assert load_checkpoint(path, activation="relu").activation == "relu"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "aug.ckpt"
        save_checkpoint(path, init_params(4, tiny_hp(k=1, heads=1), seed=0))
        blob = bytearray(path.read_bytes())
        blob[:8] = b"RALF-XXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "aug.ckpt"
        save_checkpoint(path, init_params(4, tiny_hp(k=1, heads=1), seed=0))
        blob = bytearray(path.read_bytes())
        blob[8] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_truncations(self, tmp_path):
        path = tmp_path / "aug.ckpt"
        save_checkpoint(path, init_params(4, tiny_hp(k=1, heads=1), seed=0))
        blob = path.read_bytes()
        path.write_bytes(blob[:10])
        with pytest.raises(FormatError, match="header"):
            load_checkpoint(path)
        path.write_bytes(blob[:-6])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "aug.ckpt"
        save_checkpoint(path, init_params(4, tiny_hp(k=1, heads=1), seed=0))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_loaded_params_run_forward(self, tmp_path, rng):
        p = init_params(8, tiny_hp(), seed=13)
        path = tmp_path / "aug.ckpt"
        save_checkpoint(path, p)
        loaded = load_checkpoint(path)
        batch = make_batch(rng, 2, 3, 8)
        out = augment_batch(batch, loaded)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
