"""Command-line orchestration with seeded end-to-end reproducibility.

Every subcommand writes its artifacts under the run directory (--out) and
appends one manifest line recording the command, the config hash, and the
sha256 of each input and output file, so any artifact can be regenerated
bit-for-bit from its manifest line.

Exit codes: 0 success, 1 component error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import detection as dv
from . import diffusion as df
from . import dynamic_transform as dt
from . import image_stats as st
from . import image_watermark as iw
from . import model_watermark as mw
from . import payload as pl
from .attacks import apply_attack, attack_grid, parse_attack
from .autodiff import RngStream, Tensor
from .config import RunConfig
from .errors import DualmarkError
from .imageio import read_image, read_pgm, write_pgm
from .nets import ConditionalDecoder, Denoiser, EncoderNet, ExtractorNet, ToyAutoencoder
from .serialization import load_key, load_weights, save_key, save_weights


# ---------------------------------------------------------------------------
# Run-directory plumbing
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, out_dir: str, config: RunConfig):
        self.dir = out_dir
        self.config = config
        os.makedirs(out_dir, exist_ok=True)
        for sub in ("data", "models", "keys", "wm", "traces", "reports", "gen"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        cfg_path = self.path("config.txt")
        if not os.path.exists(cfg_path):
            config.save(cfg_path)

    def path(self, *parts) -> str:
        return os.path.join(self.dir, *parts)

    def manifest(self, command: str, inputs, outputs) -> None:
        ins = ",".join(f"{os.path.relpath(p, self.dir)}:{_sha256(p)}" for p in inputs)
        outs = ",".join(f"{os.path.relpath(p, self.dir)}:{_sha256(p)}" for p in outputs)
        line = f"{command}\t{self.config.config_hash()}\tin={ins}\tout={outs}\n"
        with open(self.path("manifest.txt"), "a", encoding="utf-8") as fh:
            fh.write(line)

    # -- shared reconstruction helpers ---------------------------------
    def schedule(self):
        return df.make_schedule(self.config["schedule.T"],
                                self.config["schedule.beta_start"],
                                self.config["schedule.beta_end"])

    def dataset(self):
        n = self.config["data.n_train"] + self.config["data.n_heldout"]
        ds = df.SyntheticDataset(n, self.config["run.image_size"],
                                 seed=self.config["run.seed"])
        split = self.config["data.n_train"]
        return ds.images[:split], ds.images[split:]

    def load_denoiser(self, name: str) -> Denoiser:
        model = Denoiser(seed=0, hidden=self.config["diffusion.hidden"],
                         emb_dim=self.config["diffusion.hidden"])
        model.load_state(load_weights(self.path("models", name)))
        return model

    def load_extractor(self) -> ExtractorNet:
        net = ExtractorNet(seed=0, k=self.config["imagewm.k"])
        net.load_state(load_weights(self.path("models", "extractor.dmwm")))
        return net

    def load_encoder(self) -> EncoderNet:
        net = EncoderNet(seed=0, k=self.config["imagewm.k"])
        net.load_state(load_weights(self.path("models", "encoder.dmwm")))
        return net

    def load_autoencoder(self) -> ToyAutoencoder:
        net = ToyAutoencoder(seed=0)
        net.load_state(load_weights(self.path("models", "autoencoder.dmwm")))
        return net

    def load_decoder(self, autoencoder) -> ConditionalDecoder:
        messages = iw.read_message_manifest(self.path("wm", "messages.manifest"),
                                            k=self.config["imagewm.k"])
        dec = ConditionalDecoder(seed=0, base=autoencoder, n_conditions=len(messages))
        dec.load_state(load_weights(self.path("models", "decoder_cond.dmwm")))
        return dec, messages

    def reference_matrix(self) -> pl.BitMatrix:
        record = pl.MetadataRecord.from_text(self.config["wdp.record"])
        return pl.encode_payload(record, B=self.config["wdp.matrix_side"],
                                 c=self.config["wdp.replication"])


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _list_images(directory):
    names = sorted(n for n in os.listdir(directory)
                   if n.endswith(".pgm") or n.endswith(".ppm"))
    if not names:
        raise DualmarkError(f"no PGM/PPM images in {directory}")
    return [(n, read_image(os.path.join(directory, n))) for n in names]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth_data(run: Run, args) -> None:
    train, held = run.dataset()
    outs = []
    for prefix, images in (("train", train), ("held", held)):
        for i, img in enumerate(images):
            p = run.path("data", f"{prefix}_{i:03d}.pgm")
            write_pgm(p, (img + 1.0) / 2.0)
            outs.append(p)
    run.manifest("synth-data", [], outs)
    print(f"wrote {len(outs)} images to {run.path('data')}")


def cmd_train_diffusion(run: Run, args) -> None:
    train, _ = run.dataset()
    model = Denoiser(seed=int(RngStream(run.config["run.seed"]).split("diff-init")
                              .integers(0, 2 ** 62)),
                     hidden=run.config["diffusion.hidden"],
                     emb_dim=run.config["diffusion.hidden"])
    rng = RngStream(run.config["run.seed"]).split("diff-train")
    trace = df.train_denoiser(model, train, run.schedule(),
                              steps=run.config["diffusion.steps"], rng=rng,
                              batch_size=run.config["diffusion.batch_size"],
                              lr=run.config["diffusion.lr"])
    wpath = run.path("models", "diffusion.dmwm")
    save_weights(wpath, model.state_dict())
    tpath = run.path("traces", "diffusion_loss.csv")
    _write_csv(tpath, ["step", "loss"], list(enumerate(trace)))
    run.manifest("train-diffusion", [], [wpath, tpath])
    print(f"trained diffusion model: loss {trace[:20].mean():.4f} -> {trace[-20:].mean():.4f}")


def cmd_embed_model_wm(run: Run, args) -> None:
    train, held = run.dataset()
    model = run.load_denoiser("diffusion.dmwm")
    sched = run.schedule()
    pre = df.eval_ddpm_loss(model, held, sched,
                            RngStream(run.config["run.seed"]).split("taskeval"))
    bm = run.reference_matrix()
    ref_path = run.path("wm", "reference.pgm")
    write_pgm(ref_path, bm.render())
    wm_img = 2.0 * bm.render() - 1.0
    size = run.config["run.image_size"]
    key = mw.make_trigger_key((1, size, size), seed=run.config["wdp.key_seed"],
                              gamma_kappa=run.config["wdp.gamma_kappa"],
                              c=run.config["wdp.key_mean"])
    cfg = mw.WDPConfig(gamma_eps=run.config["wdp.gamma_eps"],
                       steps=run.config["wdp.steps"],
                       batch_size=run.config["wdp.batch_size"],
                       lr=run.config["wdp.lr"],
                       accept_threshold=run.config["wdp.accept_threshold"])
    rng = RngStream(run.config["run.seed"]).split("wdp-embed")
    trace = mw.embed_model_watermark(model, train, wm_img, key, cfg, rng, sched)
    post = df.eval_ddpm_loss(model, held, sched,
                             RngStream(run.config["run.seed"]).split("taskeval"))
    inp = run.path("models", "diffusion.dmwm")
    kpath = run.path("keys", "key.dmkey")
    save_key(kpath, key.kappa, key.gamma_kappa, key.seed, key.divergence_score)
    wpath = run.path("models", "diffusion_wm.dmwm")
    save_weights(wpath, model.state_dict())
    tpath = run.path("traces", "embed_loss.csv")
    _write_csv(tpath, ["step", "loss"], list(enumerate(trace)))
    ppath = run.path("reports", "task_preservation.csv")
    rel = abs(post - pre) / pre if pre else 0.0
    _write_csv(ppath, ["pre_loss", "post_loss", "rel_change"], [[pre, post, rel]])
    run.manifest("embed-model-wm", [inp], [kpath, ref_path, wpath, tpath, ppath])
    print(f"embedded model watermark: wdp loss {trace[:20].mean():.4f} -> "
          f"{trace[-20:].mean():.4f}; task loss {pre:.4f} -> {post:.4f} ({rel * 100:.1f}%)")


def cmd_extract_model_wm(run: Run, args) -> None:
    model = run.load_denoiser("diffusion_wm.dmwm")
    kpath = args.key or run.path("keys", "key.dmkey")
    kappa, gamma, seed, score = load_key(kpath)
    key = mw.TriggerKey(kappa=kappa, gamma_kappa=gamma, seed=seed,
                        divergence_score=score)
    sched = run.schedule()
    size = run.config["run.image_size"]
    rng = RngStream(run.config["run.seed"]).split("wdp-extract")
    extracted = mw.extract_model_watermark(model, key, sched, rng,
                                           shape=(1, 1, size, size))
    bm = run.reference_matrix()
    verdict = mw.verify_model_watermark(extracted, bm,
                                        threshold=run.config["wdp.accept_threshold"])
    epath = run.path("wm", "extracted.pgm")
    write_pgm(epath, np.clip((extracted + 1.0) / 2.0, 0.0, 1.0))
    vpath = run.path("reports", "model_wm_verdict.csv")
    _write_csv(vpath, ["run_id", "key_id", "matched", "total", "accuracy", "accepted"],
               [[run.config.config_hash()[:12], key.seed, verdict.matched_bits,
                 verdict.total_bits, verdict.bit_accuracy, int(verdict.accepted)]])
    run.manifest("extract-model-wm",
                 [run.path("models", "diffusion_wm.dmwm"), kpath], [epath, vpath])
    print(f"extraction bit accuracy {verdict.bit_accuracy:.4f} "
          f"({'accepted' if verdict.accepted else 'rejected'})")


def cmd_train_extractor(run: Run, args) -> None:
    train, _ = run.dataset()
    rng = RngStream(run.config["run.seed"]).split("extractor-train")
    enc, ext, trace = iw.train_extractor(
        train, k=run.config["imagewm.k"], steps=run.config["imagewm.extractor_steps"],
        rng=rng, alpha=run.config["imagewm.alpha"],
        lambda_img=run.config["imagewm.lambda_img"],
        batch_size=run.config["imagewm.batch_size"], lr=run.config["imagewm.lr"])
    epath = run.path("models", "encoder.dmwm")
    xpath = run.path("models", "extractor.dmwm")
    save_weights(epath, enc.state_dict())
    save_weights(xpath, ext.state_dict())
    tpath = run.path("traces", "extractor_loss.csv")
    _write_csv(tpath, ["step", "loss"], list(enumerate(trace)))
    run.manifest("train-extractor", [], [epath, xpath, tpath])
    print(f"trained encoder/extractor: loss {trace[:20].mean():.4f} -> "
          f"{trace[-20:].mean():.4f}")


def cmd_finetune_decoder(run: Run, args) -> None:
    train, _ = run.dataset()
    rng = RngStream(run.config["run.seed"])
    ae_path = run.path("models", "autoencoder.dmwm")
    if os.path.exists(ae_path):
        ae = run.load_autoencoder()
    else:
        ae, _ = iw.train_autoencoder(train, steps=run.config["imagewm.autoencoder_steps"],
                                     rng=rng.split("ae-train"),
                                     batch_size=run.config["imagewm.batch_size"],
                                     lr=run.config["imagewm.lr"])
        save_weights(ae_path, ae.state_dict())
    extractor = run.load_extractor()
    texts = [t for t in run.config["imagewm.messages"].split("|") if t]
    n = run.config["imagewm.n_conditions"]
    if len(texts) < n:
        texts = texts + [f"condition {i}" for i in range(len(texts), n)]
    messages = [iw.message_from_text(texts[i], k=run.config["imagewm.k"], condition=i)
                for i in range(n)]
    decoder, trace = iw.finetune_conditional_decoder(
        ae, messages, extractor, train, steps=run.config["imagewm.decoder_steps"],
        rng=rng.split("dec-train"), lambda_rec=run.config["imagewm.lambda_rec"],
        batch_size=run.config["imagewm.batch_size"], lr=run.config["imagewm.lr"])
    dpath = run.path("models", "decoder_cond.dmwm")
    save_weights(dpath, decoder.state_dict())
    mpath = run.path("wm", "messages.manifest")
    iw.write_message_manifest(mpath, messages)
    tpath = run.path("traces", "decoder_loss.csv")
    _write_csv(tpath, ["step", "loss"], list(enumerate(trace)))
    run.manifest("finetune-decoder", [run.path("models", "extractor.dmwm")],
                 [ae_path, dpath, mpath, tpath])
    print(f"fine-tuned conditional decoder over {n} conditions: loss "
          f"{trace[:20].mean():.4f} -> {trace[-20:].mean():.4f}")


def cmd_generate(run: Run, args) -> None:
    model = run.load_denoiser("diffusion_wm.dmwm" if args.watermarked
                              else "diffusion.dmwm")
    sched = run.schedule()
    size = run.config["run.image_size"]
    rng = RngStream(run.config["run.seed"]).split("generate")
    outs = []
    for i in range(args.n):
        img = df.sample(model, sched, rng.split(f"img{i}"), shape=(1, 1, size, size))
        p = run.path("gen", f"sample_{i:03d}.pgm")
        write_pgm(p, np.clip((img[0, 0] + 1.0) / 2.0, 0.0, 1.0))
        outs.append(p)
    run.manifest("generate", [], outs)
    print(f"generated {args.n} samples into {run.path('gen')}")


def cmd_embed_image_wm(run: Run, args) -> None:
    encoder = run.load_encoder()
    images = _list_images(args.images or run.path("data"))
    msg = iw.message_from_text(args.message, k=run.config["imagewm.k"])
    outdir = run.path("wm", "embedded")
    os.makedirs(outdir, exist_ok=True)
    outs = []
    for name, img in images:
        x = 2.0 * img - 1.0
        w = iw.embed_residual(x[None] if x.ndim == 2 else x, msg, encoder,
                              alpha=run.config["imagewm.alpha"])
        p = os.path.join(outdir, name)
        write_pgm(p, (w[0] + 1.0) / 2.0)
        outs.append(p)
    run.manifest("embed-image-wm", [run.path("models", "encoder.dmwm")], outs)
    print(f"embedded '{args.message}' into {len(outs)} images")


def cmd_extract_image_wm(run: Run, args) -> None:
    extractor = run.load_extractor()
    images = _list_images(args.images or run.path("wm", "embedded"))
    mpath = run.path("wm", "messages.manifest")
    registry = (iw.read_message_manifest(mpath, k=run.config["imagewm.k"])
                if os.path.exists(mpath) else [])
    rows = []
    for name, img in images:
        x = 2.0 * img - 1.0
        bits = iw.bits_from_logits(iw.extract_bits(extractor, x[None] if x.ndim == 2 else x))
        msg = iw.WatermarkMessage(bits=bits)
        row = [name, msg.hex()]
        if registry:
            verdict = dv.classify_watermark(bits, registry)
            p = dv.presence_test(bits, registry[verdict.best_index].bits,
                                 run.config["detect.alpha_level"])
            row += [verdict.best_index, p.matches, p.k, p.p_value, int(p.present)]
        rows.append(row)
    header = ["file", "bits_hex"]
    if registry:
        header += ["classified", "matches", "k", "p_value", "present"]
    rpath = run.path("reports", "extract_bits.csv")
    _write_csv(rpath, header, rows)
    run.manifest("extract-image-wm", [run.path("models", "extractor.dmwm")], [rpath])
    print(f"extracted bits from {len(rows)} images -> {rpath}")


def cmd_optimize_transform(run: Run, args) -> None:
    if args.image:
        img = read_pgm(args.image)
        inputs = [args.image]
    else:
        bm = run.reference_matrix()
        img = bm.render()
        inputs = []
    fx = dt.default_feature_extractor(seed=run.config["transform.feature_seed"])
    weights = dt.ObjectiveWeights(run.config["transform.lambda_cos"],
                                  run.config["transform.lambda_ssim"])
    rng = RngStream(run.config["run.seed"]).split("transform")
    params, trace = dt.optimize_transform(img, weights, fx,
                                          budget=run.config["transform.budget"],
                                          rng=rng,
                                          restarts=run.config["transform.restarts"])
    ppath = run.path("wm", "transform_params.txt")
    with open(ppath, "w", encoding="utf-8") as fh:
        fh.write(" ".join(repr(float(v)) for v in params.flat()) + "\n")
    tpath = run.path("traces", "transform_trace.csv")
    _write_csv(tpath, ["step", "objective"], list(enumerate(trace)))
    out_img = dt.apply_transform(img, params)
    opath = run.path("wm", "transformed.pgm")
    write_pgm(opath, out_img if out_img.ndim == 2 else out_img[0])
    run.manifest("optimize-transform", inputs, [ppath, tpath, opath])
    print(f"optimized transform: objective {trace[0]:.4f} -> {trace[-1]:.4f}")


def cmd_attack(run: Run, args) -> None:
    spec = parse_attack(args.spec)
    images = _list_images(args.images or run.path("gen"))
    outdir = run.path("attacked", spec.label().replace(":", "_"))
    os.makedirs(outdir, exist_ok=True)
    outs = []
    for name, img in images:
        out = apply_attack(img, spec)
        p = os.path.join(outdir, name)
        write_pgm(p, out if out.ndim == 2 else out[0])
        outs.append(p)
    run.manifest("attack", [], outs)
    print(f"applied {spec.label()} to {len(outs)} images -> {outdir}")


def cmd_stats(run: Run, args) -> None:
    images = _list_images(args.images)
    rows = [[name] + list(st.compute_stats_vector(img).to_array())
            for name, img in images]
    spath = run.path("reports", "stats.csv")
    _write_csv(spath, ["file"] + list(st.FIELD_NAMES), rows)
    outs = [spath]
    if args.clean:
        clean = _list_images(args.clean)
        cmp = st.corpus_comparison([img for _, img in images],
                                   [img for _, img in clean])
        cpath = run.path("reports", "stats_comparison.csv")
        _write_csv(cpath, ["row"] + list(st.FIELD_NAMES), [
            ["Watermarked"] + list(cmp.watermarked_mean.to_array()),
            ["Clean"] + list(cmp.clean_mean.to_array()),
            ["Difference"] + list(cmp.difference_pct),
        ])
        outs.append(cpath)
        print(f"mean difference {cmp.mean_difference_pct:.2f}%")
    run.manifest("stats", [], outs)
    print(f"stats written to {spath}")


def cmd_evaluate(run: Run, args) -> None:
    _, held = run.dataset()
    ae = run.load_autoencoder()
    extractor = run.load_extractor()
    decoder, messages = run.load_decoder(ae)
    grid = [parse_attack(s) for s in run.config["attack.grid"].split(",")]
    report = dv.attack_evaluation(decoder, ae, extractor, messages, held,
                                  grid=grid,
                                  alpha_level=run.config["detect.alpha_level"],
                                  rng=RngStream(run.config["run.seed"]))
    epath = run.path("reports", "evaluation.csv")
    _write_csv(epath, ["metric"] + report.attack_labels, [
        ["presence_rate"] + list(report.presence_rate),
        ["classification_accuracy"] + list(report.classification_accuracy),
    ])
    jpath = run.path("reports", "per_image.jsonl")
    with open(jpath, "w", encoding="utf-8") as fh:
        for entry in report.per_image:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    # Toy quality scores: stats-vector features standardized over both corpora.
    with ad.no_grad():
        latents = ae.encode(Tensor(held[:, None])).data
        clean = ae(Tensor(held[:, None])).data
    wm_imgs = [iw.generate_watermarked(decoder, latents[i], i % len(messages))[0]
               for i in range(held.shape[0])]
    stats_of = lambda imgs: np.stack(
        [st.compute_stats_vector((np.asarray(im) + 1.0) / 2.0).to_array() for im in imgs])
    feats_wm = stats_of(wm_imgs)
    feats_clean = stats_of(list(clean[:, 0]))
    feats_orig = stats_of(list(held))
    mu = np.concatenate([feats_wm, feats_clean, feats_orig]).mean(axis=0)
    sd = np.concatenate([feats_wm, feats_clean, feats_orig]).std(axis=0)
    sd[sd == 0] = 1.0
    norm = lambda f: (f - mu) / sd
    fid_wm = dv.toy_frechet(norm(feats_wm), norm(feats_orig)).d2
    fid_clean = dv.toy_frechet(norm(feats_clean), norm(feats_orig)).d2
    probs_wm = np.stack([
        dv.classification_probs(
            iw.bits_from_logits(iw.extract_bits(extractor, im[None])), messages)
        for im in wm_imgs])
    probs_clean = np.stack([
        dv.classification_probs(
            iw.bits_from_logits(iw.extract_bits(extractor, clean[i])), messages)
        for i in range(clean.shape[0])])
    qpath = run.path("reports", "quality.csv")
    _write_csv(qpath, ["method", "toy_is", "toy_fid"], [
        ["watermarked", dv.toy_inception_score(probs_wm), fid_wm],
        ["clean", dv.toy_inception_score(probs_clean), fid_clean],
    ])
    run.manifest("evaluate", [run.path("models", "decoder_cond.dmwm"),
                              run.path("models", "extractor.dmwm")],
                 [epath, jpath, qpath])
    print(f"presence rates: {dict(zip(report.attack_labels, np.round(report.presence_rate, 3)))}")
    print(f"false positive rate {report.false_positive_rate:.4f} "
          f"on {report.n_negative} negatives")


def cmd_report(run: Run, args) -> None:
    epath = run.path("reports", "evaluation.csv")
    if not os.path.exists(epath):
        raise DualmarkError("run `evaluate` before `report`")
    with open(epath, encoding="utf-8") as fh:
        lines = [line.strip().split(",") for line in fh if line.strip()]
    header, presence_row, cls_row = lines[0], lines[1], lines[2]
    labels = header[1:]
    presence = np.array([float(v) for v in presence_row[1:]])
    flags = []
    base = ref = None
    for label, rate in zip(labels, presence):
        kind = label.split(":")[0]
        if kind == "identity":
            base = rate
        if kind == "texture":
            ref = rate
    if base is not None and ref is not None:
        for label, rate in zip(labels, presence):
            kind = label.split(":")[0]
            if kind in ("flip", "crop") and (base - rate) > (base - ref) + 1e-12:
                flags.append(f"ordering violation: {label} degrades presence more "
                             f"than texture reduction")
    rpath = run.path("reports", "report.csv")
    rows = [["presence_rate"] + list(presence),
            ["classification_accuracy"] + [float(v) for v in cls_row[1:]]]
    _write_csv(rpath, ["metric"] + labels, rows)
    fpath = run.path("reports", "flags.txt")
    with open(fpath, "w", encoding="utf-8") as fh:
        fh.write(f"attack_grid={run.config['attack.grid']}\n")
        for flag in flags:
            fh.write(flag + "\n")
        if not flags:
            fh.write("no ordering violations\n")
    run.manifest("report", [epath], [rpath, fpath])
    print(f"report at {rpath}; {len(flags)} ordering flags")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualmark",
        description="Dual watermarking for a toy diffusion model")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("--config", default=None, help="config file (key=value lines)")
    parser.add_argument("--out", default="run", help="run directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", help="materialize the synthetic dataset")
    sub.add_parser("train-diffusion", help="train the host diffusion model")
    sub.add_parser("embed-model-wm", help="fine-tune the model watermark in")
    p = sub.add_parser("extract-model-wm", help="key-triggered watermark extraction")
    p.add_argument("--key", default=None, help="key file (defaults to the run's key)")
    sub.add_parser("train-extractor", help="train the image-watermark encoder/extractor")
    sub.add_parser("finetune-decoder", help="fine-tune the conditional decoder")
    p = sub.add_parser("generate", help="sample images from the diffusion model")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--watermarked", action="store_true",
                   help="sample from the watermarked model")
    p = sub.add_parser("embed-image-wm", help="embed a message into images")
    p.add_argument("--images", default=None, help="input image directory")
    p.add_argument("--message", required=True)
    p = sub.add_parser("extract-image-wm", help="extract bits from images")
    p.add_argument("--images", default=None)
    p = sub.add_parser("optimize-transform", help="optimize the dynamic transform")
    p.add_argument("--image", default=None, help="watermark image (default: reference)")
    p = sub.add_parser("attack", help="apply one attack to a directory of images")
    p.add_argument("--images", default=None)
    p.add_argument("--spec", required=True, help="e.g. rotation:10, blur:1.0:5")
    p = sub.add_parser("stats", help="image statistics (+comparison with --clean)")
    p.add_argument("--images", required=True)
    p.add_argument("--clean", default=None)
    sub.add_parser("evaluate", help="attack-grid evaluation of the image watermark")
    sub.add_parser("report", help="consolidate evaluation artifacts")
    return parser


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train-diffusion": cmd_train_diffusion,
    "embed-model-wm": cmd_embed_model_wm,
    "extract-model-wm": cmd_extract_model_wm,
    "train-extractor": cmd_train_extractor,
    "finetune-decoder": cmd_finetune_decoder,
    "generate": cmd_generate,
    "embed-image-wm": cmd_embed_image_wm,
    "extract-image-wm": cmd_extract_image_wm,
    "optimize-transform": cmd_optimize_transform,
    "attack": cmd_attack,
    "stats": cmd_stats,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        config = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            config.values["run.seed"] = args.seed
        run = Run(args.out, config)
        HANDLERS[args.command](run, args)
        return 0
    except (DualmarkError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
