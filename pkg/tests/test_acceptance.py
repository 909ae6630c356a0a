"""Acceptance suite: one test per criterion, each printing a PASS line.

Heavy fixtures (the trained models) are built once per session at their full
budgets; everything downstream reuses them. Budgets, seeds, and defaults
mirror src/dualmark/config.py, so the CLI reproduces these runs.
"""

import time

import numpy as np
import pytest

from dualmark import autodiff as ad
from dualmark import attacks as atk
from dualmark import detection as dv
from dualmark import diffusion as df
from dualmark import dynamic_transform as dt
from dualmark import image_stats as st
from dualmark import image_watermark as iw
from dualmark import model_watermark as mw
from dualmark import payload as pl
from dualmark.autodiff import RngStream, Tensor
from dualmark.config import RunConfig
from dualmark.nets import Denoiser

from conftest import gradcheck

CFG = RunConfig()


def report(criterion: str, passed: bool, detail: str = ""):
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}" + (f" ({detail})" if detail else ""))
    assert passed, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# Session fixtures: the trained artifacts
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def corpus():
    n = CFG["data.n_train"] + CFG["data.n_heldout"]
    ds = df.SyntheticDataset(n, CFG["run.image_size"], seed=CFG["run.seed"])
    return ds.images[:CFG["data.n_train"]], ds.images[CFG["data.n_train"]:]


@pytest.fixture(scope="session")
def schedule():
    return df.make_schedule(CFG["schedule.T"], CFG["schedule.beta_start"],
                            CFG["schedule.beta_end"])


@pytest.fixture(scope="session")
def reference_matrix():
    record = pl.MetadataRecord.from_text(CFG["wdp.record"])
    return pl.encode_payload(record, B=CFG["wdp.matrix_side"],
                             c=CFG["wdp.replication"])


@pytest.fixture(scope="session")
def model_wm_bundle(corpus, schedule, reference_matrix):
    """Host training + watermark embedding at the stated budgets."""
    train, held = corpus
    t0 = time.time()
    model = Denoiser(seed=int(RngStream(CFG["run.seed"]).split("diff-init")
                              .integers(0, 2 ** 62)),
                     hidden=CFG["diffusion.hidden"], emb_dim=CFG["diffusion.hidden"])
    df.train_denoiser(model, train, schedule, steps=CFG["diffusion.steps"],
                      rng=RngStream(CFG["run.seed"]).split("diff-train"),
                      batch_size=CFG["diffusion.batch_size"], lr=CFG["diffusion.lr"])
    pre_loss = df.eval_ddpm_loss(model, held, schedule,
                                 RngStream(CFG["run.seed"]).split("taskeval"))
    size = CFG["run.image_size"]
    key = mw.make_trigger_key((1, size, size), seed=CFG["wdp.key_seed"],
                              gamma_kappa=CFG["wdp.gamma_kappa"],
                              c=CFG["wdp.key_mean"])
    wm_img = 2.0 * reference_matrix.render() - 1.0
    config = mw.WDPConfig(gamma_eps=CFG["wdp.gamma_eps"], steps=CFG["wdp.steps"],
                          batch_size=CFG["wdp.batch_size"], lr=CFG["wdp.lr"])
    trace = mw.embed_model_watermark(model, train, wm_img, key, config,
                                     RngStream(CFG["run.seed"]).split("wdp-embed"),
                                     schedule)
    post_loss = df.eval_ddpm_loss(model, held, schedule,
                                  RngStream(CFG["run.seed"]).split("taskeval"))
    return {
        "model": model, "key": key, "trace": trace,
        "pre_loss": pre_loss, "post_loss": post_loss,
        "runtime_s": time.time() - t0,
    }


@pytest.fixture(scope="session")
def image_wm_bundle(corpus):
    """Extractor training + autoencoder + conditional decoder fine-tune."""
    train, held = corpus
    rng = RngStream(CFG["run.seed"])
    enc, ext, trace = iw.train_extractor(
        train, k=CFG["imagewm.k"], steps=CFG["imagewm.extractor_steps"],
        rng=rng.split("extractor-train"), alpha=CFG["imagewm.alpha"],
        lambda_img=CFG["imagewm.lambda_img"],
        batch_size=CFG["imagewm.batch_size"], lr=CFG["imagewm.lr"])
    ae, _ = iw.train_autoencoder(train, steps=CFG["imagewm.autoencoder_steps"],
                                 rng=rng.split("ae-train"),
                                 batch_size=CFG["imagewm.batch_size"],
                                 lr=CFG["imagewm.lr"])
    ae_err = iw.reconstruction_error(ae, held)
    texts = CFG["imagewm.messages"].split("|")
    messages = [iw.message_from_text(texts[i], k=CFG["imagewm.k"], condition=i)
                for i in range(CFG["imagewm.n_conditions"])]
    decoder, dtrace = iw.finetune_conditional_decoder(
        ae, messages, ext, train, steps=CFG["imagewm.decoder_steps"],
        rng=rng.split("dec-train"), lambda_rec=CFG["imagewm.lambda_rec"],
        batch_size=CFG["imagewm.batch_size"], lr=CFG["imagewm.lr"])
    return {
        "encoder": enc, "extractor": ext, "autoencoder": ae, "decoder": decoder,
        "messages": messages, "trace": trace, "ae_error": ae_err,
    }


# ---------------------------------------------------------------------------
# Criterion 1: gradient validity in under 60 s
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_validity(rng):
    t0 = time.time()
    x = Tensor(rng.gaussian((2, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.gaussian((3, 2, 3, 3)) * 0.4, requires_grad=True)
    b = Tensor(rng.gaussian((3,)) * 0.2, requires_grad=True)
    wt = Tensor(rng.gaussian((2, 2, 4, 4)) * 0.4, requires_grad=True)
    m1 = Tensor(rng.gaussian((3, 4)), requires_grad=True)
    m2 = Tensor(rng.gaussian((4, 2)), requires_grad=True)
    targets = (rng.uniform((2, 2, 6, 6)) < 0.5).astype(np.float64)
    checks = {
        "add/mul/scale": lambda: ad.tsum(ad.scale(ad.mul(ad.add(x, x), x), 0.3)),
        "sub/div": lambda: ad.tsum(ad.div(ad.sub(x, ad.scale(x, 0.5)),
                                          ad.add(ad.mul(x, x), 2.0))),
        "matmul": lambda: ad.tsum(ad.mul(ad.matmul(m1, m2), ad.matmul(m1, m2))),
        "conv2d": lambda: ad.tmean(ad.mul(ad.conv2d(x, w, b, padding=1),
                                          ad.conv2d(x, w, b, padding=1))),
        "conv2d_transpose": lambda: ad.tmean(
            ad.mul(ad.conv2d_transpose(x, wt, stride=2, padding=1),
                   ad.conv2d_transpose(x, wt, stride=2, padding=1))),
        "relu": lambda: ad.tsum(ad.mul(ad.relu(x), ad.relu(x))),
        "sigmoid": lambda: ad.tsum(ad.sigmoid(x)),
        "tanh": lambda: ad.tsum(ad.tanh(x)),
        "mean/sum": lambda: ad.tsum(ad.mul(ad.tmean(x, axis=(2, 3)),
                                           ad.tsum(x, axis=(2, 3)))),
        "mse": lambda: ad.mse(x, ad.scale(x, 0.0)),
        "bce_with_logits": lambda: ad.tsum(ad.bce_with_logits(x, targets)),
        "bilinear_resize": lambda: ad.tsum(ad.mul(ad.bilinear_resize(x, 9, 5),
                                                  ad.bilinear_resize(x, 9, 5))),
        "concat/reshape": lambda: ad.tsum(ad.mul(
            ad.concat([ad.reshape(x, (2, 72)), ad.reshape(x, (2, 72))], axis=1),
            ad.concat([ad.reshape(x, (2, 72)), ad.reshape(x, (2, 72))], axis=1))),
        "crop/flip": lambda: ad.tsum(ad.mul(ad.flip2d(ad.crop2d(x, 1, 1, 4, 4), 3),
                                            ad.flip2d(ad.crop2d(x, 1, 1, 4, 4), 3))),
        "clamp": lambda: ad.tsum(ad.mul(ad.clamp(x, -0.9, 0.9),
                                        ad.clamp(x, -0.9, 0.9))),
        "powf": lambda: ad.tsum(ad.powf(ad.add(ad.mul(x, x), 1.0), 0.5)),
    }
    tensors = {"add/mul/scale": [x], "sub/div": [x], "matmul": [m1, m2],
               "conv2d": [x, w, b], "conv2d_transpose": [x, wt], "relu": [x],
               "sigmoid": [x], "tanh": [x], "mean/sum": [x], "mse": [x],
               "bce_with_logits": [x], "bilinear_resize": [x],
               "concat/reshape": [x], "crop/flip": [x], "clamp": [x], "powf": [x]}
    # affine warp (custom op) checked at a generic point
    theta = Tensor(np.array([0.93, 0.1, -0.07, 1.04, 0.5, -0.4]), requires_grad=True)
    img = rng.uniform((1, 10, 10))
    checks["affine_warp"] = lambda: ad.tmean(ad.mul(dt.affine_warp(img, theta),
                                                    dt.affine_warp(img, theta)))
    tensors["affine_warp"] = [theta]
    for name, build in checks.items():
        gradcheck(build, tensors[name], tol=1e-4)
    elapsed = time.time() - t0
    report("criterion 1: gradient validity",
           elapsed < 60.0, f"all ops within 1e-4, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 2: published-row Difference arithmetic
# ---------------------------------------------------------------------------


def test_criterion_2_difference_row_arithmetic():
    wm_row = [354.80, 0.19, 46.41, 1124.47, 85.73, 6.00, 6.31, 8836.29, 63.04,
              5.92, 1.55]
    clean_row = [371.23, 0.19, 48.34, 1209.43, 88.18, 7.00, 6.23, 8903.23, 67.00,
                 5.65, 1.42]
    diff_row = [4.63, 0.00, 4.16, 7.56, 2.86, 16.67, 1.27, 0.76, 6.28, 4.56, 8.39]
    cmp = st.compare_stat_rows(wm_row, clean_row)
    deviations = np.abs(cmp.difference_pct - np.array(diff_row))
    mean_diff = cmp.mean_difference_pct
    ok = bool(np.all(deviations <= 0.01)) and 4.5 <= mean_diff <= 6.0
    report("criterion 2: Difference-row reproduction",
           ok, f"max dev {deviations.max():.4f} pp, mean {mean_diff:.2f}%")


# ---------------------------------------------------------------------------
# Criteria 3 + 4: model-watermark round trip and task preservation
# ---------------------------------------------------------------------------


def test_criterion_3_model_watermark_round_trip(model_wm_bundle, schedule,
                                                reference_matrix):
    bundle = model_wm_bundle
    size = CFG["run.image_size"]
    extracted = mw.extract_model_watermark(
        bundle["model"], bundle["key"], schedule,
        RngStream(CFG["run.seed"]).split("wdp-extract"), shape=(1, 1, size, size))
    verdict = mw.verify_model_watermark(extracted, reference_matrix)
    wrong_accs = []
    for i in range(10):
        wkey = mw.make_trigger_key((1, size, size), seed=9000 + i,
                                   gamma_kappa=CFG["wdp.gamma_kappa"],
                                   c=CFG["wdp.key_mean"])
        wrong = mw.extract_model_watermark(
            bundle["model"], wkey, schedule,
            RngStream(CFG["run.seed"]).split(f"wrong-{i}"),
            shape=(1, 1, size, size))
        wrong_accs.append(mw.verify_model_watermark(wrong, reference_matrix)
                          .bit_accuracy)
    runtime_ok = bundle["runtime_s"] <= 15 * 60
    right_ok = verdict.bit_accuracy >= 0.95
    wrong_ok = all(0.4 <= a <= 0.6 for a in wrong_accs)
    # embedding fixture: final joint loss under half its initial value
    trace_ok = bundle["trace"][-50:].mean() < 0.5 * bundle["trace"][:20].mean()
    report("criterion 3: model-watermark round trip",
           right_ok and wrong_ok and runtime_ok and trace_ok,
           f"right {verdict.bit_accuracy:.3f}, wrong "
           f"[{min(wrong_accs):.2f}, {max(wrong_accs):.2f}], "
           f"{bundle['runtime_s']:.0f}s, loss ratio "
           f"{bundle['trace'][-50:].mean() / bundle['trace'][:20].mean():.2f}")


def test_criterion_4_task_preservation(model_wm_bundle):
    pre = model_wm_bundle["pre_loss"]
    post = model_wm_bundle["post_loss"]
    rel = abs(post - pre) / pre
    report("criterion 4: task preservation", rel <= 0.10,
           f"held-out loss {pre:.4f} -> {post:.4f} ({rel * 100:.1f}%)")


# ---------------------------------------------------------------------------
# Criterion 5: image-watermark learning
# ---------------------------------------------------------------------------


def test_criterion_5_overfit_fixture(corpus):
    train, _ = corpus
    msg = iw.message_from_text("overfit probe", k=48)
    enc, ext, _ = iw.train_extractor(train[:1], k=48, steps=500,
                                     rng=RngStream(7), batch_size=1,
                                     messages=msg.bits[None])
    xw = iw.embed_residual(train[0][None], msg, enc, CFG["imagewm.alpha"])
    acc = iw.bit_accuracy(ext, xw[None], msg.bits)
    report("criterion 5a: overfit fixture", acc == 1.0, f"train accuracy {acc}")


def test_criterion_5_toy_fixture(corpus, image_wm_bundle):
    _, held = corpus
    bundle = image_wm_bundle
    enc, ext = bundle["encoder"], bundle["extractor"]
    k = CFG["imagewm.k"]
    rng = RngStream(123)
    bits = (rng.uniform((held.shape[0], k)) < 0.5).astype(np.uint8)
    xw = np.stack([iw.embed_residual(held[i][None],
                                     iw.WatermarkMessage(bits=bits[i]), enc,
                                     CFG["imagewm.alpha"])
                   for i in range(held.shape[0])])
    per_attack = {}
    for spec in atk.attack_grid():
        if spec.kind in ("compress", "texture"):
            continue
        vals = []
        for i in range(held.shape[0]):
            attacked = atk.apply_attack((xw[i, 0] + 1.0) / 2.0, spec)
            vals.append(iw.bit_accuracy(ext, (2.0 * attacked - 1.0)[None, None],
                                        bits[i]))
        per_attack[spec.label()] = float(np.mean(vals))
    identity_ok = per_attack["identity"] >= 0.9
    attacked_ok = all(v >= 0.75 for v in per_attack.values())
    # presence p-values: watermarked strong, clean reconstructions null
    p_wm = []
    for i in range(held.shape[0]):
        extracted = iw.bits_from_logits(iw.extract_bits(ext, xw[i]))
        p_wm.append(dv.presence_test(extracted, bits[i]).p_value)
    ae = bundle["autoencoder"]
    with ad.no_grad():
        clean = ae(Tensor(held[:, None])).data
    p_clean = []
    for i in range(held.shape[0]):
        extracted = iw.bits_from_logits(iw.extract_bits(ext, clean[i]))
        p_clean.append(dv.presence_test(extracted, bits[i]).p_value)
    p_ok = max(p_wm) < 1e-6 and min(p_clean) > 0.01
    report("criterion 5b: toy fixture accuracy",
           identity_ok and attacked_ok and p_ok,
           f"accs {({k_: round(v, 3) for k_, v in per_attack.items()})}, "
           f"max p(wm) {max(p_wm):.2e}, min p(clean) {min(p_clean):.3f}")


# ---------------------------------------------------------------------------
# Criterion 6: robustness ordering sanity
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def attack_report(corpus, image_wm_bundle):
    _, held = corpus
    bundle = image_wm_bundle
    return dv.attack_evaluation(bundle["decoder"], bundle["autoencoder"],
                                bundle["extractor"], bundle["messages"], held,
                                alpha_level=CFG["detect.alpha_level"],
                                rng=RngStream(CFG["run.seed"]))


def test_criterion_6_robustness_ordering(attack_report):
    rates = dict(zip(attack_report.attack_labels, attack_report.presence_rate))
    base = rates["identity"]
    drop = {label.split(":")[0]: base - rate for label, rate in rates.items()}
    violations = attack_report.ordering_violations()
    ok = drop["flip"] <= drop["texture"] + 1e-12 and \
        drop["crop"] <= drop["texture"] + 1e-12 and not violations
    report("criterion 6: robustness ordering",
           ok, f"drops flip {drop['flip']:.3f}, crop {drop['crop']:.3f}, "
               f"texture {drop['texture']:.3f}; flags {violations}")


def test_criterion_6_report_shape(attack_report):
    ok = len(attack_report.attack_labels) == 7 and \
        len(attack_report.presence_rate) == 7 and \
        len(attack_report.classification_accuracy) == 7
    report("criterion 6b: report shape 7 columns x 2 metric rows", ok)


# ---------------------------------------------------------------------------
# Criterion 7: codec exactness
# ---------------------------------------------------------------------------


def test_criterion_7_codec_exactness():
    rng = RngStream(404)
    for _ in range(1000):
        n = int(rng.integers(1, 64))
        data = bytes(int(b) for b in rng.integers(0, 256, (n,)))
        table, bits = pl.huffman_encode(data)
        assert pl.huffman_decode(table, bits) == data
    for trial in range(20):
        n = int(rng.integers(32, 256))
        data = bytes(int(min(b, 16)) for b in rng.integers(0, 24, (n,)))
        table, bits = pl.huffman_encode(data)
        counts = np.bincount(np.frombuffer(data, dtype=np.uint8))
        p = counts[counts > 0] / n
        entropy = float(-(p * np.log2(p)).sum())
        assert len(bits) / n <= entropy + 1.0 + 1e-12
    assert pl.crc16(b"123456789") == 0x29B1
    record = pl.MetadataRecord.from_text(CFG["wdp.record"])
    bm = pl.encode_payload(record, B=16, c=3)
    img = bm.render()
    for flip in (False, True):
        base = np.fliplr(img) if flip else img
        for k in range(4):
            assert pl.decode_payload(np.rot90(base, k).copy(), 16, 3) == record
    ok_noise = 0
    for trial in range(200):
        nrng = RngStream(9000 + trial)
        noisy = img.copy()
        m = int(0.15 * noisy.size)
        idx = nrng.integers(0, noisy.size, (m,))
        noisy.reshape(-1)[idx] = (nrng.uniform((m,)) < 0.5).astype(np.float64)
        try:
            if pl.decode_payload(noisy, 16, 3) == record:
                ok_noise += 1
        except Exception:
            pass
    report("criterion 7: codec exactness", ok_noise >= 190,
           f"noise success {ok_noise}/200, CRC check value 0x29B1, "
           f"8/8 dihedral placements")


# ---------------------------------------------------------------------------
# Criterion 8: metric identities
# ---------------------------------------------------------------------------


def test_criterion_8_metric_identities(rng):
    img = rng.uniform((24, 24))
    ssim_self = dt.ssim(img, img)
    a = np.full((16, 16), 0.5)
    b = np.full((16, 16), 0.25)
    closed = (2 * 0.5 * 0.25 + dt.SSIM_C1) / (0.5 ** 2 + 0.25 ** 2 + dt.SSIM_C1)
    const_ok = abs(dt.ssim(a, b) - closed) <= 1e-6
    A = rng.gaussian((40, 3))
    frechet_ident = dv.toy_frechet(A, A.copy()).d2
    x1 = rng.gaussian((200, 1)) * 1.3 + 0.4
    x2 = rng.gaussian((200, 1)) * 0.7 - 0.2
    closed_1d = float((x1.mean() - x2.mean()) ** 2
                      + (x1.std(ddof=1) - x2.std(ddof=1)) ** 2)
    frechet_1d_dev = abs(dv.toy_frechet(x1, x2).d2 - closed_1d)
    is_onehot_devs = [abs(dv.toy_inception_score(np.eye(n)) - n) for n in (2, 4, 8)]
    ok = (abs(ssim_self - 1.0) <= 1e-12 and const_ok
          and frechet_ident <= 1e-9 and frechet_1d_dev <= 1e-9
          and max(is_onehot_devs) <= 1e-9)
    report("criterion 8: metric identities", ok,
           f"ssim(I,I)-1 {ssim_self - 1:.1e}, frechet ident {frechet_ident:.1e}, "
           f"1-D dev {frechet_1d_dev:.1e}, IS dev {max(is_onehot_devs):.1e}")


# ---------------------------------------------------------------------------
# Criterion 9: transform optimizer
# ---------------------------------------------------------------------------


def test_criterion_9_transform_optimizer(reference_matrix):
    img = reference_matrix.render()
    fx = dt.default_feature_extractor(seed=CFG["transform.feature_seed"])
    weights = dt.ObjectiveWeights(CFG["transform.lambda_cos"],
                                  CFG["transform.lambda_ssim"])
    identity_obj = dt.objective(img, dt.TransformParams.identity(1), weights, fx)
    params, trace = dt.optimize_transform(
        img, weights, fx, budget=CFG["transform.budget"],
        rng=RngStream(CFG["run.seed"]).split("transform"),
        restarts=CFG["transform.restarts"])
    monotone = bool(np.all(np.diff(trace) <= 1e-15))
    bounded = trace[-1] <= 0.8 * identity_obj + 1e-12
    report("criterion 9: transform optimizer",
           monotone and bounded and params.in_box(),
           f"identity {identity_obj:.4f}, final {trace[-1]:.4f}, "
           f"{len(trace) - 1} accepted steps")


# ---------------------------------------------------------------------------
# Criterion 10: manifest determinism
# ---------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    from dualmark.cli import main

    cfg = RunConfig({
        "diffusion.steps": 30, "diffusion.hidden": 8, "wdp.steps": 15,
        "data.n_train": 6, "data.n_heldout": 6, "imagewm.k": 16,
        "imagewm.extractor_steps": 40, "imagewm.autoencoder_steps": 40,
        "imagewm.decoder_steps": 20, "transform.budget": 8,
    })
    cfgpath = str(tmp_path / "fixture.cfg")
    cfg.save(cfgpath)

    def run_all(out):
        for cmd in ("synth-data", "train-diffusion", "embed-model-wm",
                    "extract-model-wm", "train-extractor", "finetune-decoder",
                    "optimize-transform"):
            assert main(["--out", out, "--config", cfgpath, cmd]) == 0, cmd

    run_all(str(tmp_path / "a"))
    run_all(str(tmp_path / "b"))
    files = ["data/train_000.pgm", "models/diffusion.dmwm",
             "models/diffusion_wm.dmwm", "models/extractor.dmwm",
             "models/decoder_cond.dmwm", "keys/key.dmkey", "wm/extracted.pgm",
             "wm/transform_params.txt", "reports/model_wm_verdict.csv",
             "manifest.txt"]
    mismatched = [f for f in files
                  if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    report("criterion 10: determinism", not mismatched,
           f"{len(files)} artifacts byte-identical"
           + (f"; mismatched {mismatched}" if mismatched else ""))
