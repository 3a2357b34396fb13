"""``upmixflow`` command line: prepare, train, infer, binauralize, eval, downmix.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

import numpy as np

from . import __version__
from .codec import LatentNormalizer, LatentTensor, decode, encode, read_latent, write_latent
from .config import PipelineConfig, load_config, write_resolved
from .flow import TrainResult, append_history, read_history, smoothed, train
from .layout import ChannelLayout, MultichannelAudio, downmix, segment
from .manifest import DatasetManifest, ManifestEntry, ManifestError, checksum, read_manifest, split_of
from .metrics import channel_report
from .ode import SolverError, integrate
from .scene import parse_scene, synth_scene
from .spatial import binauralize, read_hrir_set, synthetic_hrir_set
from .velocity import CheckpointError, init_parameters, load_checkpoint, save_checkpoint
from .wavio import WavError, read_wav, write_wav

log = logging.getLogger("upmixflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sidecar(out: str) -> str:
    """Where the resolved config goes: inside an output directory, or next to an output file."""
    return os.path.join(out, "config.resolved.ini") if os.path.isdir(out) else out + ".config.ini"


def _mkparent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# --- prepare -----------------------------------------------------------------

def _load_source(path: str, cfg: PipelineConfig) -> MultichannelAudio:
    if path.endswith(".scene"):
        with open(path) as fh:
            spec = parse_scene(fh.read())
        audio = synth_scene(spec)
    else:
        audio = read_wav(path, ChannelLayout.layout_714())
    if audio.sample_rate != cfg.codec.sample_rate:
        raise WavError(f"{path}: sample rate {audio.sample_rate} Hz; only {cfg.codec.sample_rate} Hz "
                       "input is accepted (no resampling)")
    return audio


def cmd_prepare(cfg: PipelineConfig, inputs: str, out: str) -> DatasetManifest:
    sources = sorted(glob.glob(os.path.join(inputs, "*.wav")) + glob.glob(os.path.join(inputs, "*.scene")))
    if not os.path.isdir(inputs):
        raise ManifestError(f"input directory not found: {inputs}")
    for sub in ("clips", "latents"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    entries = []
    for src in sources:
        stem = os.path.splitext(os.path.basename(src))[0]
        for k, clip in enumerate(segment(_load_source(src, cfg), cfg.clip_seconds)):
            cid = f"{stem}_{k:03d}"
            rel = {"714": f"clips/{cid}.714.wav", "stereo": f"clips/{cid}.stereo.wav",
                   "l714": f"latents/{cid}.714.iflt", "lst": f"latents/{cid}.stereo.iflt"}
            path = {k2: os.path.join(out, v) for k2, v in rel.items()}
            write_wav(clip, path["714"])
            write_wav(downmix(clip), path["stereo"])
            # latents come from the files as stored, so inference sees the same input
            write_latent(encode(read_wav(path["714"], ChannelLayout.layout_714()), cfg.codec), path["l714"])
            write_latent(encode(read_wav(path["stereo"]), cfg.codec), path["lst"])
            files = [path[k2] for k2 in ("714", "stereo", "l714", "lst")]
            entries.append(ManifestEntry(cid, split_of(cid), rel["714"], rel["stereo"], rel["l714"],
                                         rel["lst"], clip.duration, checksum(files)))
    if not entries:
        raise ManifestError(f"{inputs}: no clips (need *.wav or *.scene of at least {cfg.clip_seconds} s)")
    manifest = DatasetManifest(entries, out)
    manifest.write(os.path.join(out, "manifest.tsv"))
    write_resolved(cfg, _sidecar(out))
    log.info("prepared %d clips (%d train / %d test)", len(entries), len(manifest.split("train")),
             len(manifest.split("test")))
    return manifest


# --- train -------------------------------------------------------------------

def _normalizers(manifest: DatasetManifest, entries):
    z714 = [read_latent(manifest.resolve(e.path_latent_714)) for e in entries]
    zst = [read_latent(manifest.resolve(e.path_latent_stereo)) for e in entries]
    return z714, zst, LatentNormalizer.fit(z714), LatentNormalizer.fit(zst)


def cmd_train(cfg: PipelineConfig, manifest_path: str, out: str) -> TrainResult:
    manifest = read_manifest(manifest_path)
    entries = manifest.split("train")
    if not entries:
        raise ManifestError(f"{manifest_path}: train split is empty")
    z714, zst, n714, nst = _normalizers(manifest, entries)
    for z in z714 + zst:
        if z.latent_dim != cfg.codec.latent_dim or z.frames > cfg.net.max_frames:
            raise ManifestError(f"latent [{z.channels}, {z.latent_dim}, {z.frames}] does not fit the "
                                f"configured D={cfg.codec.latent_dim}, max_frames={cfg.net.max_frames}")
    data = [(nst.standardize(c).data, n714.standardize(t).data) for t, c in zip(z714, zst)]
    extra = {"norm714_mean": n714.mean, "norm714_std": n714.std,
             "normst_mean": nst.mean, "normst_std": nst.std}

    os.makedirs(out, exist_ok=True)
    latest = os.path.join(out, "latest.ifck")
    loss_log = os.path.join(out, "loss.tsv")
    net, opt, start = init_parameters(cfg.net, cfg.seed), None, 0
    if os.path.exists(latest):
        ck = load_checkpoint(latest, expect=cfg.net)
        net, opt, start = ck.net, ck.optimizer_state, ck.step
        log.info("resuming from step %d", start)
    # the log is rewritten up to the resume point so it never holds steps twice
    kept = [h for h in read_history(loss_log) if h[0] <= start] if os.path.exists(loss_log) else []
    open(loss_log, "w").close()
    append_history(kept, loss_log)

    pending: list[tuple[int, float]] = []

    def on_step(step, value, net_, state):
        pending.append((step, value))
        every = cfg.train.checkpoint_every
        if (every and step % every == 0) or step == cfg.train.steps:
            append_history(pending, loss_log)
            pending.clear()
            save_checkpoint(net_, state, step, os.path.join(out, f"step_{step:08d}.ifck"), extra)
            save_checkpoint(net_, state, step, latest, extra)

    result = train(data, net, cfg.train, optimizer_state=opt, start_step=start, on_step=on_step)
    save_checkpoint(result.net, result.optimizer_state, cfg.train.steps,
                    os.path.join(out, "final.ifck"), extra)
    write_resolved(cfg, _sidecar(out))
    hist = read_history(loss_log)
    if hist:
        s = smoothed([v for _, v in hist])
        log.info("loss %.4f -> %.4f (smoothed)", hist[0][1], s[-1])
    return result


# --- infer -------------------------------------------------------------------

def upmix(cfg: PipelineConfig, checkpoint: str, stereo: MultichannelAudio, seed: int):
    """Stereo audio to 7.1.4 audio; returns the audio and one SolveReport per chunk."""
    ck = load_checkpoint(checkpoint, expect=cfg.net)
    if stereo.sample_rate != cfg.codec.sample_rate:
        raise WavError(f"input at {stereo.sample_rate} Hz, model expects {cfg.codec.sample_rate} Hz")
    if stereo.num_channels != 2:
        raise WavError(f"expected a stereo input, got {stereo.num_channels} channels")
    try:
        n714 = LatentNormalizer(ck.extra["norm714_mean"], ck.extra["norm714_std"])
        nst = LatentNormalizer(ck.extra["normst_mean"], ck.extra["normst_std"])
    except KeyError as exc:
        raise CheckpointError(f"{checkpoint}: no latent statistics stored ({exc})") from exc
    zc = nst.standardize(encode(stereo, cfg.codec)).data
    frames, chunk = zc.shape[2], cfg.net.max_frames
    parts, reports = [], []
    for i, lo in enumerate(range(0, frames, chunk)):
        cond = zc[:, :, lo:lo + chunk]
        z0 = np.random.default_rng([seed, i]).standard_normal((cfg.net.target_channels,) + cond.shape[1:])
        rep = integrate(z0, ck.net, cond, cfg.solver)
        parts.append(rep.z)
        reports.append(rep)
    z = n714.destandardize(LatentTensor(np.concatenate(parts, axis=2), cfg.codec.frame_rate))
    return decode(z, cfg.codec, ChannelLayout.layout_714()), reports


def cmd_infer(cfg: PipelineConfig, checkpoint: str, inp: str, out: str, seed: int) -> MultichannelAudio:
    audio, reports = upmix(cfg, checkpoint, read_wav(inp), seed)
    _mkparent(out)
    clipped = write_wav(audio, out)
    with open(out + ".solve.tsv", "w") as fh:
        fh.write("chunk\taccepted\trejected\tevaluations\tt_final\n")
        for i, r in enumerate(reports):
            fh.write(f"{i}\t{r.accepted}\t{r.rejected}\t{r.evaluations}\t{r.t_final!r}\n")
    write_resolved(cfg, _sidecar(out))
    if clipped:
        log.warning("%d samples clipped to [-1, 1]", clipped)
    return audio


# --- binauralize / eval / downmix ---------------------------------------------

def cmd_binauralize(cfg: PipelineConfig, inp: str, out: str, hrir: str | None) -> MultichannelAudio:
    audio = read_wav(inp, ChannelLayout.layout_714())
    hrirs = read_hrir_set(hrir) if hrir else synthetic_hrir_set(audio.sample_rate)
    if hrirs.sample_rate != audio.sample_rate:
        raise WavError(f"input at {audio.sample_rate} Hz, HRIRs at {hrirs.sample_rate} Hz")
    res = binauralize(audio, hrirs)
    _mkparent(out)
    write_wav(res, out)
    write_resolved(cfg, _sidecar(out))
    return res


def cmd_eval(cfg: PipelineConfig, ref: str, gen: str, out: str):
    layout = ChannelLayout.layout_714()
    report = channel_report(read_wav(ref, layout), read_wav(gen, layout))
    _mkparent(out)
    report.write_tsv(out)
    write_resolved(cfg, _sidecar(out))
    return report


def cmd_downmix(cfg: PipelineConfig, inp: str, out: str) -> MultichannelAudio:
    res = downmix(read_wav(inp, ChannelLayout.layout_714()))
    _mkparent(out)
    write_wav(res, out)
    write_resolved(cfg, _sidecar(out))
    return res


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="upmixflow", description="Stereo to 7.1.4 upmixing with a flow-matching model.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="INI config file (default: desk profile)")
        sp.add_argument("--profile", choices=("desk", "full"), help="override [run] profile")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("prepare", help="segment, downmix and encode a directory of 7.1.4 WAVs or scene files")
    sp.add_argument("inputs")
    common(sp, "dataset directory")
    sp = sub.add_parser("train", help="train the velocity model on a prepared dataset")
    sp.add_argument("--manifest", required=True)
    common(sp, "checkpoint directory (resumes from latest.ifck)")
    sp = sub.add_parser("infer", help="stereo WAV to 7.1.4 WAV")
    sp.add_argument("input")
    sp.add_argument("--checkpoint", required=True)
    common(sp, "output WAV")
    sp = sub.add_parser("binauralize", help="7.1.4 WAV to binaural stereo WAV")
    sp.add_argument("input")
    sp.add_argument("--hrir", help="IFIR HRIR set (default: built-in synthetic set)")
    common(sp, "output WAV")
    sp = sub.add_parser("eval", help="per-channel report of a generated 7.1.4 WAV against a reference")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--gen", required=True)
    common(sp, "report TSV")
    sp = sub.add_parser("downmix", help="7.1.4 WAV to stereo WAV")
    sp.add_argument("input")
    common(sp, "output WAV")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.profile).with_seed(args.seed)
        seed = cfg.seed
        if args.command == "prepare":
            cmd_prepare(cfg, args.inputs, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.manifest, args.out)
        elif args.command == "infer":
            cmd_infer(cfg, args.checkpoint, args.input, args.out, seed)
        elif args.command == "binauralize":
            cmd_binauralize(cfg, args.input, args.out, args.hrir)
        elif args.command == "eval":
            cmd_eval(cfg, args.ref, args.gen, args.out)
        elif args.command == "downmix":
            cmd_downmix(cfg, args.input, args.out)
    except (FloatingPointError, SolverError) as exc:
        print(f"upmixflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, WavError, CheckpointError) as exc:
        print(f"upmixflow: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
