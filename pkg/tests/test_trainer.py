import numpy as np
import pytest

from rrsitr.data import NoiseSpec, batch_iter, generate_synthetic, inject_noise
from rrsitr.errors import ConfigError, FormatError, NumericError
from rrsitr.selfpaced import overall_objective
from rrsitr.trainer import (VARIANTS, Adam, Hyper, ProjectionHeads, ablate,
                            batch_objective, clip_gradients, forward, gradients,
                            init_heads, load_heads, lr_at, objective_with_frozen,
                            resolve_variant, save_heads, train)


def _small_problem(seed=0, rho=0.4, n=40, dim=10, d1=3, d2=2):
    ds = generate_synthetic(n, 4, dim, d1, d2, intra_class_spread=1.0, seed=seed)
    return inject_noise(ds, NoiseSpec(rho=rho, seed=seed + 1))


def _hyper(**kw):
    base = dict(batch_size=10, gamma1=2.0, gamma2=9.0, epochs=3, warmup_steps=5,
                lr=1e-2, seed=0)
    base.update(kw)
    return Hyper(**base)


# ---------------------------------------------------------------------------
# forward

def test_forward_identity_heads_keep_unit_input():
    ds = _small_problem(rho=0.0)
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = ProjectionHeads(np.eye(ds.dim), np.zeros(ds.dim),
                            np.eye(ds.dim), np.zeros(ds.dim))
    out = forward(heads, batch)
    assert np.allclose(out.image_global, batch.image_global, atol=1e-9)
    assert np.allclose(out.text_local, batch.text_local, atol=1e-9)


def test_forward_scale_invariance():
    ds = _small_problem()
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = init_heads(ds.dim, seed=3, noise_std=0.2)
    out1 = forward(heads, batch)
    scaled = ProjectionHeads(heads.W_img * 4.2, heads.b_img * 4.2,
                             heads.W_txt * 4.2, heads.b_txt * 4.2)
    out2 = forward(scaled, batch)
    assert np.allclose(out1.image_global, out2.image_global, atol=1e-12)
    assert np.allclose(out1.text_global, out2.text_global, atol=1e-12)


def test_forward_shapes_and_unit_norm():
    ds = _small_problem(dim=8)
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = init_heads(8, dim_out=6, seed=1)
    out = forward(heads, batch)
    assert out.image_global.shape == (10, 6)
    assert out.image_local.shape == (10, 3, 6)
    assert np.allclose(np.linalg.norm(out.image_global, axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(out.text_local, axis=2), 1.0, atol=1e-9)


def test_forward_dim_mismatch():
    ds = _small_problem(dim=8)
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    with pytest.raises(ConfigError):
        forward(init_heads(12), batch)


# ---------------------------------------------------------------------------
# gradients vs central finite differences

def _fd_check(heads, batch, hyper, variant, n_coords=15, h=1e-5, tol=1e-6, rng_seed=0):
    wrng = np.random.default_rng(123)
    grads, state = gradients(heads, batch, hyper, variant, weight_rng=wrng)
    plan = state.plan
    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for name, P in heads.params().items():
        flat = P.ravel()
        for k in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            orig = flat[k]
            flat[k] = orig + h
            fp = objective_with_frozen(heads, batch, hyper, plan)
            flat[k] = orig - h
            fm = objective_with_frozen(heads, batch, hyper, plan)
            flat[k] = orig
            fd = (fp - fm) / (2 * h)
            an = grads[name].ravel()[k]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    assert worst < tol, worst
    return state


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_gradients_match_finite_differences(variant):
    ds = _small_problem()
    hyper = _hyper()
    batch = next(batch_iter(ds, 10, epoch_seed=2))
    heads = init_heads(ds.dim, seed=5, noise_std=0.05)
    state = _fd_check(heads, batch, hyper, VARIANTS[variant])
    assert np.isfinite(state.loss)


def test_gradients_survive_training_steps():
    # guards against stale-weight bugs in the alternation
    ds = _small_problem()
    hyper = _hyper(epochs=1)
    heads = init_heads(ds.dim, seed=0)
    opt = Adam(heads, weight_decay=0.0)
    batches = list(batch_iter(ds, 10, epoch_seed=0))
    for step in range(10):
        grads, _ = gradients(heads, batches[step % len(batches)], hyper)
        opt.step(grads, 1e-2)
    _fd_check(heads, batches[0], hyper, VARIANTS["full"])


def test_gradients_reduce_to_plain_infonce():
    # uniform weights, lambdas off: gradient of mean per-pair InfoNCE
    ds = _small_problem(rho=0.0)
    hyper = _hyper(lambda1=0.0, lambda2=0.0)
    batch = next(batch_iter(ds, 10, epoch_seed=1))
    heads = init_heads(ds.dim, seed=2, noise_std=0.05)
    grads, state = gradients(heads, batch, hyper, VARIANTS["no_spl"])

    # independent reference: differentiate mean InfoNCE directly by softmax identities
    from rrsitr.trainer import _project_batch, _local_similarity_from_units, _renorm_backward

    p = _project_batch(heads, batch)
    b = batch.size
    tau = hyper.tau

    def ref_grad_S(S):
        z = S / tau
        er = np.exp(z - z.max(axis=1, keepdims=True))
        P_row = er / er.sum(axis=1, keepdims=True)
        ec = np.exp(z - z.max(axis=0, keepdims=True))
        P_col = ec / ec.sum(axis=0, keepdims=True)
        G = (P_row + P_col) / b
        G[np.arange(b), np.arange(b)] -= 2.0 / b
        return G / tau

    Sg = p.Uig @ p.Utg.T
    Sl, G_loc, norms = _local_similarity_from_units(p, b)
    Gg = ref_grad_S(Sg)
    Gl = ref_grad_S(Sl)
    dUig = Gg @ p.Utg
    dUtg = Gg.T @ p.Uig
    W4 = Gl / (np.maximum(norms, 1e-12) * np.sqrt(p.d1 * p.d2))
    dGflat = (G_loc.reshape(b, p.d1, b, p.d2) * W4[:, None, :, None]).reshape(b * p.d1, b * p.d2)
    dUil = dGflat @ p.Utl
    dZig = _renorm_backward(dUig, p.Uig, p.rig)
    dZil = _renorm_backward(dUil, p.Uil, p.ril)
    want_W_img = dZig.T @ batch.image_global + dZil.T @ batch.image_local.reshape(b * p.d1, -1)
    assert np.allclose(grads["W_img"], want_W_img, atol=1e-12)


def test_gradients_zero_for_all_noisy_without_rtl():
    ds = _small_problem(rho=1.0)
    # tiny gammas force everything into the noisy bucket
    hyper = _hyper(gamma1=1e-6, gamma2=2e-6, lambda2=0.0)
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = init_heads(ds.dim, seed=1)
    grads, state = gradients(heads, batch, hyper)
    assert len(state.partition.noisy_idx) == 10
    assert state.loss == 0.0
    for g in grads.values():
        assert np.allclose(g, 0.0, atol=1e-15)


def test_overall_objective_wrapper_matches_trainer():
    ds = _small_problem()
    hyper = _hyper()
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = init_heads(ds.dim, seed=1)
    total, parts, part, weights = overall_objective(batch, heads, hyper)
    state = batch_objective(heads, batch, hyper)
    assert total == pytest.approx(state.loss, abs=1e-15)
    assert parts.L_S1 == pytest.approx(state.parts.L_S1)
    assert np.array_equal(part.clean_idx, state.partition.clean_idx)
    assert np.allclose(weights.w, state.weights.w)


def test_objective_rtl_full_batch_vs_noisy_only():
    ds = _small_problem(rho=0.5)
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = init_heads(ds.dim, seed=1)
    full = batch_objective(heads, batch, _hyper())
    restricted = batch_objective(heads, batch, _hyper(rtl_noisy_only=True))
    assert restricted.parts.L_soft <= full.parts.L_soft + 1e-12


# ---------------------------------------------------------------------------
# schedule / optimizer

def test_lr_schedule_shape():
    hyper = Hyper(lr=7e-6, warmup_steps=200)
    total = 1000
    assert lr_at(0, total, hyper) == 0.0
    assert lr_at(100, total, hyper) == pytest.approx(3.5e-6)
    assert lr_at(200, total, hyper) == pytest.approx(7e-6)
    assert lr_at(600, total, hyper) == pytest.approx(3.5e-6, rel=1e-12)  # cosine midpoint
    assert lr_at(total, total, hyper) == pytest.approx(0.0, abs=1e-18)
    # monotone decay after warmup
    vals = [lr_at(s, total, hyper) for s in range(200, 1001)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_lr_schedule_no_warmup():
    hyper = Hyper(lr=1e-3, warmup_steps=0)
    assert lr_at(0, 10, hyper) == pytest.approx(1e-3)


def test_clip_gradients():
    grads = {"a": np.full(4, 10.0), "b": np.full(9, 10.0)}
    norm = clip_gradients(grads, max_norm=5.0)
    assert norm == pytest.approx(np.sqrt(13 * 100.0))
    post = np.sqrt(sum((g ** 2).sum() for g in grads.values()))
    assert post <= 5.0 + 1e-9
    small = {"a": np.array([0.1])}
    clip_gradients(small, 5.0)
    assert small["a"][0] == 0.1  # untouched below the threshold


# ---------------------------------------------------------------------------
# training loop

def test_train_zero_epochs_returns_init():
    ds = _small_problem()
    hyper = _hyper(epochs=0)
    heads, log = train(ds, hyper)
    want = init_heads(ds.dim, seed=hyper.seed)
    assert np.array_equal(heads.W_img, want.W_img)
    assert log.records == []


def test_train_deterministic():
    ds = _small_problem()
    hyper = _hyper(epochs=2)
    h1, log1 = train(ds, hyper)
    h2, log2 = train(ds, hyper)
    for k in h1.params():
        assert np.array_equal(h1.params()[k], h2.params()[k])
    assert [r.loss_overall for r in log1.records] == [r.loss_overall for r in log2.records]
    assert [r.n_noisy for r in log1.records] == [r.n_noisy for r in log2.records]


def test_train_descends():
    ds = _small_problem(n=80, rho=0.2)
    hyper = _hyper(epochs=10, warmup_steps=4, lr=5e-3)
    heads, log = train(ds, hyper)
    assert log.records[-1].loss_overall < log.records[0].loss_overall


def test_train_records_and_trace():
    ds = _small_problem(n=30)
    hyper = _hyper(epochs=3, batch_size=10)
    heads, log = train(ds, hyper, trace_epochs=[1, 3])
    assert [r.epoch for r in log.records] == [1, 2, 3]
    assert sorted(log.traces) == [1, 3]
    trace = log.traces[3]
    assert np.array_equal(trace.pair_id, np.arange(30))
    assert log.final_trace.epoch == 3
    assert np.all((trace.w >= 0) & (trace.w <= 1))
    assert set(np.unique(trace.bucket)) <= {0, 1, 2}
    rec = log.records[0]
    assert rec.n_clean + rec.n_ambiguous + rec.n_noisy == 30
    assert sum(rec.weight_hist) == 30


def test_train_validation_checkpoint_selection():
    train_ds = _small_problem(n=60, rho=0.6)
    val_ds = generate_synthetic(30, 4, 10, 3, 2, intra_class_spread=1.0, seed=99)
    hyper = _hyper(epochs=4, lr=5e-3)
    heads, log = train(train_ds, hyper, val_dataset=val_ds)
    assert log.best_epoch is not None
    mrs = [r.val_mr for r in log.records]
    assert all(m is not None for m in mrs)
    best = max(range(len(mrs)), key=lambda i: (mrs[i], -i)) + 1
    assert log.best_epoch == best


def test_train_divergence_reports_context():
    # runaway decoupled weight decay flips and amplifies W until it overflows
    ds = _small_problem()
    hyper = _hyper(lr=1.0, weight_decay=1e100, epochs=2, warmup_steps=0)
    with pytest.raises(NumericError, match="epoch"):
        with np.errstate(all="ignore"):
            train(ds, hyper)


def test_train_pace_schedule_flag():
    ds = _small_problem(n=30)
    heads, log = train(ds, _hyper(epochs=2, pace_epochs=4))
    assert log.records  # smoke: schedule path runs


# ---------------------------------------------------------------------------
# ablation variants

def test_ablate_full_equals_train():
    ds = _small_problem(n=30)
    hyper = _hyper(epochs=2)
    h1, _ = train(ds, hyper)
    h2, _ = ablate(ds, hyper, "full")
    assert np.array_equal(h1.W_img, h2.W_img)


def test_ablate_unknown_variant():
    ds = _small_problem(n=30)
    with pytest.raises(ConfigError):
        ablate(ds, _hyper(), "bogus")


def test_variant_aliases():
    assert resolve_variant("#2") is VARIANTS["no_spl"]
    assert resolve_variant("#8") is VARIANTS["fixed_margin_rtl"]
    assert resolve_variant("full") is VARIANTS["full"]


def test_no_spl_logs_unit_weights():
    ds = _small_problem(n=30)
    _, log = ablate(ds, _hyper(epochs=2), "no_spl")
    for trace in [log.final_trace]:
        assert np.all(trace.w == 1.0)


def test_fixed_margin_differs_only_in_margins():
    ds = _small_problem()
    hyper = _hyper()
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = init_heads(ds.dim, seed=4)
    full = batch_objective(heads, batch, hyper, VARIANTS["full"])
    fixed = batch_objective(heads, batch, hyper, VARIANTS["fixed_margin_rtl"])
    assert np.array_equal(full.rtl.hard_txt_idx, fixed.rtl.hard_txt_idx)
    assert np.array_equal(full.rtl.hard_img_idx, fixed.rtl.hard_img_idx)
    assert np.all(fixed.rtl.mu_hat == hyper.sigma)
    assert np.all(full.rtl.mu_hat >= hyper.sigma - 1e-15)
    assert np.allclose(full.l_total, fixed.l_total)  # contrastive side identical


def test_hard_to_easy_reverses_ordering():
    ds = _small_problem()
    hyper = _hyper()
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = init_heads(ds.dim, seed=4)
    spl = batch_objective(heads, batch, hyper, VARIANTS["full"])
    rev = batch_objective(heads, batch, hyper, VARIANTS["spl_hard_to_easy"])
    part = spl.partition
    for bucket, gamma in ((part.clean_idx, hyper.gamma1), (part.ambiguous_idx, hyper.gamma2)):
        for i in bucket:
            assert rev.weights.w[i] == pytest.approx(1.0 - spl.weights.w[i], abs=1e-12)
    assert np.all(rev.weights.w[part.noisy_idx] == 0.0)


def test_random_weights_in_range_and_seeded():
    ds = _small_problem(n=30)
    hyper = _hyper(epochs=2)
    _, log1 = ablate(ds, hyper, "spl_random_weights")
    _, log2 = ablate(ds, hyper, "spl_random_weights")
    assert np.array_equal(log1.final_trace.w, log2.final_trace.w)
    assert np.all((log1.final_trace.w >= 0) & (log1.final_trace.w <= 1))
    assert len(np.unique(log1.final_trace.w)) > 20


def test_no_ambiguous_merges_into_noisy():
    ds = _small_problem()
    hyper = _hyper()
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = init_heads(ds.dim, seed=4)
    merged = batch_objective(heads, batch, hyper, VARIANTS["spl_no_ambiguous"])
    assert len(merged.partition.ambiguous_idx) == 0
    base = batch_objective(heads, batch, hyper, VARIANTS["full"])
    want_noisy = sorted(np.concatenate([base.partition.ambiguous_idx,
                                        base.partition.noisy_idx]).tolist())
    assert merged.partition.noisy_idx.tolist() == want_noisy
    assert merged.parts.L_S2 == 0.0


def test_no_local_ignores_local_loss():
    ds = _small_problem()
    hyper = _hyper()
    batch = next(batch_iter(ds, 10, epoch_seed=0))
    heads = init_heads(ds.dim, seed=4)
    no_local = batch_objective(heads, batch, hyper, VARIANTS["no_local"])
    base = batch_objective(heads, batch, hyper, VARIANTS["full"])
    assert np.allclose(no_local.l_total, base.l_g)
    assert no_local.l_l is None


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip(tmp_path):
    heads = init_heads(8, dim_out=6, seed=3, noise_std=0.3)
    path = str(tmp_path / "h.rrsp")
    save_heads(heads, path)
    back = load_heads(path)
    for k in heads.params():
        assert np.array_equal(heads.params()[k], back.params()[k])


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "bad.rrsp")
    with open(path, "wb") as f:
        f.write(b"XXXX" + b"\x00" * 20)
    with pytest.raises(FormatError):
        load_heads(path)


def test_checkpoint_truncated(tmp_path):
    heads = init_heads(6, seed=0)
    path = str(tmp_path / "t.rrsp")
    save_heads(heads, path)
    blob = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(blob[:40])
    with pytest.raises(FormatError):
        load_heads(path)


def test_hyper_validation():
    with pytest.raises(ConfigError):
        Hyper(tau=0.0)
    with pytest.raises(ConfigError):
        Hyper(gamma1=5.0, gamma2=5.0)
    with pytest.raises(ConfigError):
        Hyper(alpha=1.2)
    with pytest.raises(ConfigError):
        Hyper(batch_size=1)
    with pytest.raises(ConfigError):
        Hyper(lr=0.0)
