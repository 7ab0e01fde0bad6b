import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_icl.construction import (
    ConstructionError,
    GateSide,
    InteractionRequest,
    build_decrement_ffn,
    build_gating_ffn,
    build_interaction_head,
    build_kernel_transformer,
    certify_spec,
    debug_forward,
    dump_stages,
    expected_stages,
    head_dilation,
    interaction_bound,
    interaction_constant,
    kernel_constants,
    verify_equivalence,
    verify_equivalence_batch,
)
from manifold_icl.kernel_estimator import bandwidth_for, nw_estimate
from manifold_icl.manifold_data import Manifold, Prompt, generate_task, make_embedding, make_holder_function
from manifold_icl.transformer_core import (
    AttentionHead,
    Block,
    TransformerSpec,
    attention_apply,
    block_apply,
    embed_prompt,
    forward,
    forward_batch,
    spec_to_json,
    static_rows,
)

from oracles import INTERACTION_L3_D7, interaction_bound_enumerated, stage_matrices


def _req(ell=3, d=7, kappa=1.0, U=1.0, t1=1, t2=2, Qd=None, Kd=None, vr=1):
    Qd = np.eye(d - 3, d) if Qd is None else Qd
    Kd = np.eye(d - 3, d) if Kd is None else Kd
    return InteractionRequest(t1, t2, vr, Qd, Kd, ell, U, kappa)


def _H(rng, d, ell, bound=1.0):
    H = np.empty((d, ell))
    H[: d - 3] = rng.uniform(-bound, bound, (d - 3, ell))
    H[d - 3 :] = static_rows(ell)
    return H


def _prompts(kind, n, D, count, seed=0, R=1.0):
    m = Manifold.from_name(kind)
    e = make_embedding(m.base_ambient_dim, D, seed)
    out = []
    for k in range(count):
        f = make_holder_function(m, 1.0, 1.0, R, 8, [seed, k])
        out.append(generate_task(m, e, f, n, [seed, k, 1]))
    return m, out


# ---------------------------------------------------------------- interaction


def test_interaction_constant_frozen_value():
    for t1, t2 in [(1, 1), (1, 3), (2, 2), (3, 1)]:
        c = interaction_constant(_req(t1=t1, t2=t2))
        assert c == pytest.approx(INTERACTION_L3_D7, rel=1e-13)
        assert c >= 2 * 7**4 / (1 - math.cos(math.pi / 6)) * (1 - 1e-14)


@pytest.mark.parametrize("ell,t1,t2", [(1, 1, 1), (2, 1, 2), (5, 3, 3), (9, 1, 9), (40, 17, 2)])
def test_interaction_bound_matches_enumeration(ell, t1, t2):
    got = interaction_bound(8, 2.5, 1.5, ell, t1, t2)
    assert got == pytest.approx(interaction_bound_enumerated(8, 2.5, 1.5, ell, t1, t2), rel=1e-12)


def test_interaction_constant_scaling():
    base = interaction_constant(_req(U=1.0))
    assert interaction_constant(_req(U=2.0)) == pytest.approx(4 * base, rel=1e-15)
    a = interaction_constant(_req(ell=50, t1=3, t2=7))
    b = interaction_constant(_req(ell=100, t1=3, t2=7))
    assert 3.9 < b / a < 4.1


def test_interaction_overflow_and_validation():
    with pytest.raises(ConstructionError, match="overflow"):
        interaction_constant(_req(U=1e160))
    with pytest.raises(ConstructionError):
        _req(t1=4)
    with pytest.raises(ConstructionError):
        _req(kappa=0.5, Qd=2 * np.eye(4, 7))


def test_interaction_head_zero_outside_t1():
    rng = np.random.default_rng(0)
    Qd = rng.uniform(-1, 1, (5, 8))
    Kd = rng.uniform(-1, 1, (5, 8))
    head = build_interaction_head(_req(ell=9, d=8, t1=4, t2=7, Qd=Qd, Kd=Kd, vr=2))
    H = _H(rng, 8, 9)
    out = attention_apply(head, H)
    assert np.all(np.delete(out, 3, axis=1) == 0.0)
    target = max(0.0, float((Qd @ H[:, 3]) @ (Kd @ H[:, 6])))
    assert out[1, 3] == pytest.approx(target, rel=1e-12, abs=1e-12)


def test_interaction_head_zero_data_kernel_is_exactly_zero():
    rng = np.random.default_rng(1)
    head = build_interaction_head(_req(ell=11, t1=5, t2=8, Qd=np.zeros((4, 7))))
    assert np.all(attention_apply(head, _H(rng, 7, 11)) == 0.0)


def test_copy_head_carries_coordinate_plus_offset():
    # selector query (coordinate i plus ones) against a diagonal key with +M
    D, n, M = 3, 4, 8.0
    d, ell = D + 5, 2 * n + 1
    rng = np.random.default_rng(2)
    p = Prompt(rng.uniform(-1, 1, (n + 1, D)), rng.uniform(-1, 1, n))
    H = embed_prompt(p)
    for i in range(1, D + 1):
        Qd = np.zeros((D + 2, d))
        Qd[i - 1, d - 1] = 1.0
        Qd[D + 1, d - 1] = 1.0
        Kd = np.zeros((D + 2, d))
        Kd[:D, :D] = np.eye(D)
        Kd[D + 1, d - 1] = M
        head = build_interaction_head(InteractionRequest(n + 2, n + 1, i, Qd, Kd, ell, 2.0, M))
        out = attention_apply(head, H)
        assert out[i - 1, n + 1] == pytest.approx(p.query[i - 1] + M, rel=1e-14)
        assert np.count_nonzero(out) == 1


def test_head_dilation_reports_constant():
    req = _req(ell=5, t1=2, t2=4)
    assert head_dilation(build_interaction_head(req, 3.0)) == pytest.approx(interaction_constant(req, 3.0), rel=1e-15)


# -------------------------------------------------------------------- gating


@pytest.mark.parametrize("side", [GateSide.ZERO_RIGHT, GateSide.ZERO_LEFT])
def test_gating_examples(side):
    rng = np.random.default_rng(3)
    d, ell, split = 9, 12, 5
    H = _H(rng, d, ell, 4.0)
    out = build_gating_ffn(2, 4, split, side, 4.0, ell, d).apply(H)
    cols = np.arange(1, ell + 1)
    gated = cols > split if side is GateSide.ZERO_RIGHT else cols < split
    assert np.array_equal(out[:, ~gated], H[:, ~gated])
    assert np.all(out[1:4, gated] == 0.0)
    assert np.array_equal(np.delete(out, [1, 2, 3], axis=0), np.delete(H, [1, 2, 3], axis=0))


def test_gating_validation():
    with pytest.raises(ConstructionError, match="separating"):
        build_gating_ffn(1, 1, 0, GateSide.ZERO_RIGHT, 1.0, 5, 7)
    with pytest.raises(ConstructionError):
        build_gating_ffn(1, 5, 2, GateSide.ZERO_RIGHT, 1.0, 5, 7)


def test_gating_shape():
    f = build_gating_ffn(1, 3, 2, GateSide.ZERO_LEFT, 1.0, 5, 8)
    assert len(f.layers) == 3 and f.residual and f.width == 8


# ----------------------------------------------------------------- decrement


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 25),
    st.integers(0, 26),
    st.integers(1, 27),
    st.integers(-3, 40),
    st.integers(0, 2**31 - 1),
)
def test_decrement_window_property(ell, k1, k2, e, seed):
    k1 = min(k1, ell)
    k2 = min(max(k2, k1 + 1), ell + 1)
    M = 2.0**e
    d = 8
    rng = np.random.default_rng(seed)
    H = _H(rng, d, ell, 50.0)
    out = build_decrement_ffn(2, 4, k1, k2, M, ell, d).apply(H)
    exp = H.copy()
    exp[1:4, k1 : k2 - 1] -= M
    assert np.array_equal(out, exp)


def test_decrement_zero_is_identity():
    rng = np.random.default_rng(4)
    H = _H(rng, 7, 9, 3.0)
    assert np.array_equal(build_decrement_ffn(1, 4, 0, 10, 0.0, 9, 7).apply(H), H)


def test_decrement_validation():
    with pytest.raises(ConstructionError):
        build_decrement_ffn(1, 2, 3, 3, 1.0, 5, 7)
    with pytest.raises(ConstructionError):
        build_decrement_ffn(1, 2, 0, 6, -1.0, 5, 7)


# --------------------------------------------------------------- full network


@pytest.mark.parametrize("kind,n,D", [("circle", 1, 2), ("circle", 6, 3), ("sphere", 9, 5), ("torus", 5, 8)])
def test_kernel_transformer_matches_nw(kind, n, D):
    m, ps = _prompts(kind, n, D, 6)
    h = 0.3
    spec = build_kernel_transformer(n, D, h, m.coord_bound, 1.0)
    for eq in verify_equivalence_batch(spec, ps, h):
        assert eq.rel_diff <= 1e-9
    assert certify_spec(spec) == []


def test_single_example_returns_label():
    p = Prompt([[0.2, -0.4], [0.9, 0.1]], [0.625])
    for h in (0.05, 0.3, 0.9):
        spec = build_kernel_transformer(1, 2, h, 1.0, 1.0)
        assert forward(spec, p) == 0.625
        t, o, ad, rd = verify_equivalence(spec, p, h)
        assert ad == 0.0 and t == o


def test_stage_contract_against_written_out_matrices():
    m, ps = _prompts("sphere", 4, 3, 100, seed=5)
    h = 0.35
    spec = build_kernel_transformer(4, 3, h, m.coord_bound, 1.0)
    trace = debug_forward(spec, ps)
    assert trace.violations == []
    M = spec.meta["M"]
    for k, p in enumerate(ps):
        ref = stage_matrices(p.xs.tolist(), p.ys.tolist(), h, M)
        for s in range(4):
            assert np.max(np.abs(trace.stages[s + 1][k] - ref[s])) <= 1e-9
    p = ps[0]
    exp = expected_stages(p, h, M)
    assert np.allclose(trace.stages[4][0], exp[3], atol=1e-9, rtol=0)
    D, n = 3, 4
    sq = np.sum((p.query - p.xs[:n]) ** 2, axis=1) / h**2
    assert np.allclose(trace.stages[4][0][D, n + 1 :], -sq, atol=1e-9, rtol=0)


def test_first_block_copies_query():
    m, ps = _prompts("circle", 5, 4, 1)
    spec = build_kernel_transformer(5, 4, 0.3, m.coord_bound, 1.0)
    H1 = block_apply(spec.blocks[0], embed_prompt(ps[0]))
    assert np.allclose(H1[:4, 6:], ps[0].query[:, None], atol=1e-12, rtol=0)


def test_static_rows_preserved_by_every_block():
    m, ps = _prompts("torus", 3, 6, 2)
    spec = build_kernel_transformer(3, 6, 0.4, m.coord_bound, 1.0)
    trace = debug_forward(spec, ps)
    for a, b in zip(trace.stages, trace.stages[1:]):
        assert np.array_equal(a[:, -3:], b[:, -3:])


def test_universality_bit_identical_builds():
    a = build_kernel_transformer(7, 4, 0.27, 1.0, 1.0)
    b = build_kernel_transformer(7, 4, 0.27, 1.0, 1.0)
    assert spec_to_json(a) == spec_to_json(b)


def test_kappa_grows_as_bandwidth_shrinks():
    for h in (0.4, 0.2, 0.1):
        assert kernel_constants(16, 5, h / 2, 1.0, 1.0).kappa > kernel_constants(16, 5, h, 1.0, 1.0).kappa
    spec = build_kernel_transformer(4, 3, 0.2, 1.0, 1.0)
    assert spec.kappa <= kernel_constants(4, 3, 0.2, 1.0, 1.0).kappa


def test_offsets_are_powers_of_two_above_bound():
    bc = kernel_constants(10, 7, 0.25, 1.0, 3.0)
    need = max(4 * 7 / 0.25**2, 3.0)
    assert bc.M_offset > need and math.log2(bc.M_offset).is_integer()
    assert math.log2(bc.M_copy).is_integer() and bc.M_copy >= 1.0


def test_architecture_descriptor():
    spec = build_kernel_transformer(3, 2, 0.3, 1.0, 1.0)
    desc = spec.descriptor
    assert desc.L_T == 5 and desc.d_embed == 7 and desc.ell == 7
    assert desc.m_T == 3 * 2


def test_build_validation():
    with pytest.raises(ConstructionError):
        build_kernel_transformer(0, 2, 0.3, 1.0, 1.0)
    with pytest.raises(ConstructionError):
        build_kernel_transformer(2, 2, 1.0, 1.0, 1.0)
    with pytest.raises(ConstructionError, match="overflow"):
        build_kernel_transformer(2, 2, 1e-160, 1.0, 1.0)


def _perturb_value(spec, blk_idx, head_idx, delta):
    blocks = list(spec.blocks)
    blk = blocks[blk_idx]
    heads = list(blk.heads)
    h = heads[head_idx]
    V = h.V.toarray()
    r, c = np.argwhere(V != 0)[0]
    V[r, c] += delta
    heads[head_idx] = AttentionHead(h.Q, h.K, V, h.activation, h.mask, h.query_col, h.tag)
    blocks[blk_idx] = Block(heads, blk.ffn, blk.name)
    return TransformerSpec(blocks, spec.decoder, spec.d_embed, spec.ell, spec.R, None, spec.meta)


@pytest.mark.parametrize("blk_idx", [0, 1, 2, 3, 4])
def test_perturbed_weight_is_detected(blk_idx):
    m, ps = _prompts("circle", 4, 3, 8)
    h = 0.3
    spec = build_kernel_transformer(4, 3, h, m.coord_bound, 1.0)
    bad = _perturb_value(spec, blk_idx, 0, 1e-3)
    diffs = [eq.rel_diff for eq in verify_equivalence_batch(bad, ps, h)]
    assert max(diffs) > 1e-9


def test_prompt_independent_build_verifies_many_prompts():
    spec = build_kernel_transformer(8, 6, bandwidth_for(8, 1.0, 2).h, Manifold.from_name("torus").coord_bound, 1.0)
    m, ps = _prompts("torus", 8, 6, 40, seed=9)
    vals = forward_batch(spec, ps)
    h = spec.meta["h"]
    ref = np.array([nw_estimate(p, h) for p in ps])
    assert np.max(np.abs(vals - ref) / np.maximum(1, np.abs(ref))) <= 1e-9


def test_unsafe_safety_factor_fails_certificate():
    spec = build_kernel_transformer(3, 2, 0.3, 1.0, 1.0, safety_factor=0.1)
    fails = certify_spec(spec)
    assert fails and any("B1 interaction heads" in f for f in fails)


def test_dump_stages_writes_csv_and_spec_json_round_trip(tmp_path):
    m, ps = _prompts("circle", 2, 2, 1)
    spec = build_kernel_transformer(2, 2, 0.4, m.coord_bound, 1.0)
    paths = dump_stages(spec, ps[0], tmp_path)
    assert [p.name for p in paths] == [f"H{k}.csv" for k in range(6)]
    H5 = np.loadtxt(paths[-1], delimiter=",")
    assert H5[2, 2] == forward(spec, ps[0])
    doc = json.loads(spec_to_json(spec))
    assert doc["schema_version"] == 1
