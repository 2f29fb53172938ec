#!/usr/bin/env python3
"""
vstorm - variational manifold learning from undersampled measurements

Learns a generator and per-frame Gaussian latents directly from undersampled
data: a synthetic multislice dynamic phantom (k-t acquisition with coils) and
the MNIST missing-pixel experiment.

Commands:
  make-phantom  - Simulate a multislice k-t acquisition of the phantom
  train         - Fit generator and latents to a dataset
  reconstruct   - Latent-swap reconstruction, images and metrics
  calibrate     - Sweep sigma2, lambda1, lambda2 and rank by alignment, then SER
  mnist         - MNIST experiment: train, reconstruct, manifold montage
  help          - Show this message

Flags:
  --config PATH --seed N --threads N --out DIR
  train:        --dataset PATH --mode {variational,gstorm-baseline} --epochs N --slice Z
  reconstruct:  --checkpoint PATH --dataset PATH --source-slice Z --slice Z
  calibrate:    --dataset PATH --mode M --source-slice Z --slice Z
  mnist:        --epochs N --fully-sampled --grid G --mnist-dir DIR --download

Exit codes: 0 success, 1 non-finite loss, 2 usage error.

Usage:
  python run.py make-phantom --out runs/phantom
  python run.py train --dataset runs/phantom/dataset.ktd --out runs/vstorm
  python run.py reconstruct --checkpoint runs/vstorm/checkpoint.ckpt --source-slice 1
  python run.py calibrate --dataset runs/phantom/dataset.ktd --out runs/calibration
  python run.py train --config runs/vstorm/manifest.txt --out runs/replay
  python run.py mnist --download
"""

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .config import MODES, UsageError, load_config
from .data import IdxFormatError
from .trainer import NonFiniteLossError
from .utils.container import ContainerError
from .utils.models import RunManifest

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.ktd"
CHECKPOINT_FILE = "checkpoint.ckpt"


def _manifest(command, cfg, config_path, inputs, outputs, checkpoint=""):
    manifest = RunManifest(
        command=command,
        config_path=config_path or "",
        config_text=cfg.to_text(),
        seed=cfg.seed,
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        checkpoint=str(checkpoint),
        version=__version__,
    )
    return manifest.write(cfg.out_dir)


def cmd_make_phantom(cfg, config_path=None):
    """Simulate a k-t acquisition and write the dataset."""
    from .data import acquire_kt, default_phantom_spec
    from .measurement import RandomRowEnsemble, synthetic_coil_maps

    print("\n=== MAKING PHANTOM ===\n")

    spec = default_phantom_spec(
        seed=cfg.seed,
        grid_size=cfg.grid_size,
        n_slices=cfg.n_slices,
        n_frames=cfg.n_frames,
        f_cardiac=cfg.f_cardiac,
        f_resp=cfg.f_resp,
        cardiac_amplitude=cfg.cardiac_amplitude,
        resp_amplitude=cfg.resp_amplitude,
    )
    maps = synthetic_coil_maps(cfg.grid_size, cfg.grid_size, cfg.n_coils) if cfg.n_coils else None
    ensemble = RandomRowEnsemble((cfg.grid_size, cfg.grid_size), cfg.rows_per_frame, maps)
    dataset = acquire_kt(spec, ensemble, cfg.sigma_meas, cfg.seed, snr_db=cfg.snr_db)

    path = Path(cfg.out_dir) / DATASET_FILE
    dataset.save(path)
    _manifest("make-phantom", cfg, config_path, [], [path])

    print(f"Slices: {dataset.n_slices}, frames per slice: {dataset.n_frames}")
    print(f"Grid: {cfg.grid_size}x{cfg.grid_size}, coils: {cfg.n_coils}")
    print(f"Undersampling: {cfg.grid_size / cfg.rows_per_frame:.1f}x")
    print(f"Noise sigma: {dataset.frames[0].sigma_meas:.4g}")
    print(f"Saved to: {path}")
    return path


def _load_phantom_dataset(cfg, command):
    """Load cfg.dataset_path, narrowed to cfg.train_slice when one is set."""
    from .data import KTDataset

    if not cfg.dataset_path:
        raise UsageError(f"{command} needs --dataset (or dataset_path in the config)")
    if not Path(cfg.dataset_path).exists():
        raise UsageError(f"dataset not found: {cfg.dataset_path}")
    dataset = KTDataset.load(cfg.dataset_path)
    return _narrow(dataset, cfg.train_slice)


def _narrow(dataset, train_slice):
    if train_slice < 0:
        return dataset
    if not 0 <= train_slice < dataset.n_slices:
        raise UsageError(f"--slice {train_slice} out of range for a {dataset.n_slices}-slice dataset")
    return dataset.select_slices([train_slice])


def _check_grid(dataset):
    height, width = dataset.grid_shape
    if height % 16 or width % 16:
        raise UsageError(f"the MRI generator needs a grid divisible by 16, dataset has {height}x{width}")


def cmd_train(cfg, config_path=None):
    """Fit a generator and latent bank to a dataset."""
    from .evaluation import empirical_kl_summary, kl_spread, kl_summary
    from .trainer import LossConfig, build_model, save_checkpoint, train

    dataset = _load_phantom_dataset(cfg, "train")
    _check_grid(dataset)

    print("\n=== TRAINING ===\n")

    net, bank = build_model(cfg, dataset)
    loss = LossConfig.from_run_config(cfg)

    if cfg.train_slice >= 0:
        print(f"Training on slice {cfg.train_slice} only")
    print(f"Mode: {loss.mode}, epochs: {loss.epochs}, latent dim: {bank.latent_dim}")
    print(f"Generator: {len(net.spec.layers)} layers, {net.parameter_count()} parameters")

    out = Path(cfg.out_dir)
    report = train(loss, net, bank, dataset, cfg.seed, checkpoint_dir=out / "checkpoints", config_text=cfg.to_text())
    report.final_metrics = {"kl": kl_summary(bank), "trajectory_kl": empirical_kl_summary(bank)}

    checkpoint = out / CHECKPOINT_FILE
    save_checkpoint(checkpoint, net, bank, cfg.seed, len(loss.bin_sizes) - 1, cfg.to_text())
    history = out / "history.csv"
    report.to_csv(history)
    latents = out / "latents.csv"
    bank.export_csv(latents)
    _manifest("train", cfg, config_path, [cfg.dataset_path], [checkpoint, history, latents], checkpoint)

    if report.final:
        f = report.final
        print(f"\nFinal epoch: total={f.total:.6g} data={f.data:.6g} kl={f.kl:.6g}")
    print(f"Wall time: {report.wall_time:.1f}s")
    print("\nPer-slice KL to N(0, I):")
    kl, trajectory_kl = report.final_metrics["kl"], report.final_metrics["trajectory_kl"]
    for z, (q, emp) in enumerate(zip(kl, trajectory_kl)):
        print(f"  slice {z}: q-KL={q:.4f}  trajectory-KL={emp:.4f}")
    print(f"  spread (max/min): q-KL={kl_spread(kl):.3g}  trajectory-KL={kl_spread(trajectory_kl):.3g}")
    print(f"\nCheckpoint: {checkpoint}")
    return report


def _trained_slice(cfg, header):
    """Slice a checkpoint was trained on: the flag if given, else the checkpoint's own config."""
    from .config import parse_config_text

    if cfg.train_slice >= 0:
        return cfg.train_slice
    return int(parse_config_text(header.get("config", "")).get("train_slice", "-1"))


def cmd_reconstruct(cfg, config_path=None):
    """Reconstruct every frame from one slice's latents and score it."""
    import numpy as np

    from .data import KTDataset
    from .evaluation import (
        alignment_score,
        evaluate_series,
        kl_summary,
        reconstruct_series,
        reference_series,
    )
    from .trainer import load_checkpoint
    from .utils.images import magnitude, save_image
    from .utils.models import MetricReport

    checkpoint = cfg.checkpoint_path or str(Path(cfg.out_dir) / CHECKPOINT_FILE)
    if not Path(checkpoint).exists():
        raise UsageError(f"checkpoint not found: {checkpoint}")

    print("\n=== RECONSTRUCTING ===\n")

    net, bank, header = load_checkpoint(checkpoint)
    trained_slice = _trained_slice(cfg, header)
    z = 0 if trained_slice >= 0 else cfg.source_slice
    if not 0 <= z < bank.n_slices:
        raise UsageError(f"--source-slice {z} out of range for a {bank.n_slices}-slice model")

    rng = np.random.default_rng(cfg.seed)
    series = reconstruct_series(net, bank, z, sample=cfg.sample_inference, rng=rng)
    print(f"Source slice: {z}, frames: {series.shape[0]}, slices per volume: {series.shape[1]}")

    out = Path(cfg.out_dir)
    written = []
    for t in range(series.shape[0]):
        for k in range(series.shape[1]):
            name = f"frame{t:04d}_slice{k}.{cfg.image_format}"
            written.append(save_image(out / "images" / name, magnitude(series[t, k]), 0.0, 1.0))
    print(f"Wrote {len(written)} images to {out / 'images'}")

    inputs = [checkpoint]
    reference = None
    dataset = None
    if cfg.dataset_path:
        dataset = _narrow(KTDataset.load(cfg.dataset_path), trained_slice)
        inputs.append(cfg.dataset_path)
        if dataset.phantom is not None:
            reference = reference_series(dataset.phantom, z)
        elif dataset.ground_truth is not None and dataset.n_slices == 1:
            reference = np.swapaxes(dataset.ground_truth, 0, 1)
    if reference is None:
        logger.warning("No ground truth available; metrics are limited to latent KL")

    report = evaluate_series(series, reference) if reference is not None else MetricReport()
    report.kl_per_slice = kl_summary(bank)
    if dataset is not None and dataset.phantom is not None:
        report.alignment = alignment_score(series, dataset.phantom, z, grid=cfg.phase_grid)

    metrics = out / "metrics.csv"
    report.to_csv(metrics)
    _manifest("reconstruct", cfg, config_path, inputs, [metrics], checkpoint)

    print("\nResults:")
    for name in report.metrics:
        print(f"  mean {name}: {report.aggregate(name):.4f}")
    if report.alignment is not None:
        print(f"  alignment: {report.alignment:.3f}")
    print(f"\nMetrics: {metrics}")
    return report


def cmd_calibrate(cfg, config_path=None):
    """Sweep sigma2, lambda1 and lambda2 on a phantom dataset and write the scores."""
    from .calibration import run_calibration

    dataset = _load_phantom_dataset(cfg, "calibrate")
    _check_grid(dataset)
    if dataset.phantom is None:
        raise UsageError("calibrate needs a phantom dataset (make-phantom output)")
    z = 0 if cfg.train_slice >= 0 else cfg.source_slice
    if not 0 <= z < dataset.n_slices:
        raise UsageError(f"--source-slice {z} out of range for a {dataset.n_slices}-slice dataset")

    n_runs = len(cfg.calibrate_sigma2) * len(cfg.calibrate_lambda1) * len(cfg.calibrate_lambda2)
    print("\n=== CALIBRATING ===\n")
    print(f"Mode: {cfg.mode}, {n_runs} combinations x {cfg.calibrate_epochs} epochs, source slice {z}")

    result = run_calibration(cfg, dataset, z)
    out = Path(cfg.out_dir)
    table = out / "calibration.csv"
    result.to_csv(table)
    outputs = [table]

    best = result.best
    if best is not None:
        tuned = cfg.with_overrides({"sigma2": best.sigma2, "lambda1": best.lambda1, "lambda2": best.lambda2})
        best_path = out / "best.cfg"
        best_path.write_text(tuned.to_text())
        outputs.append(best_path)
    _manifest("calibrate", cfg, config_path, [cfg.dataset_path], outputs)

    print("\nResults:")
    for point in sorted(result.points, key=lambda p: p.rank_key, reverse=True):
        print(
            f"  sigma2={point.sigma2:<6g} lambda1={point.lambda1:<7g} lambda2={point.lambda2:<7g} "
            f"alignment={point.alignment:.3f}  mean SER={point.mean_ser:.2f} dB  KL spread={point.kl_spread:.3g}"
        )
    print(f"\n{result.summary()}")
    print(f"Table: {table}")
    return result


def _mnist_paths(cfg):
    from .utils.client import TRAIN_FILES, download_mnist

    mnist_dir = Path(cfg.mnist_dir)
    if cfg.mnist_download:
        return download_mnist(mnist_dir)
    paths = []
    for name in TRAIN_FILES:
        candidates = [mnist_dir / name, mnist_dir / name.removesuffix(".gz")]
        found = next((p for p in candidates if p.exists()), None)
        if found is None:
            raise UsageError(f"{candidates[0]} not found; pass --download or --mnist-dir")
        paths.append(found)
    return paths


def cmd_mnist(cfg, config_path=None):
    """Train on corrupted (or fully sampled) MNIST digits and emit montages."""
    import numpy as np

    from .data import load_mnist_idx, mnist_dataset
    from .evaluation import evaluate_series, reconstruct_series
    from .generator import init_generator, mnist_preset
    from .latent import VariationalLatentBank
    from .trainer import LossConfig, save_checkpoint, train
    from .utils.images import montage, save_image

    images_path, labels_path = _mnist_paths(cfg)

    print("\n=== MNIST EXPERIMENT ===\n")

    images = load_mnist_idx(images_path, labels_path, digit=cfg.mnist_digit, limit=cfg.mnist_max_images)
    dataset = mnist_dataset(
        images, cfg.keep_fraction, cfg.noise_sd, cfg.seed, fully_sampled=cfg.mnist_fully_sampled
    )
    net = init_generator(mnist_preset(2, cfg.leaky_slope), cfg.seed, gain=cfg.init_gain)
    bank = VariationalLatentBank(1, len(images), 2, cfg.initial_deviation)
    loss = LossConfig.from_run_config(cfg, mnist=True)

    sampling = "fully sampled" if cfg.mnist_fully_sampled else f"{cfg.keep_fraction:.0%} of pixels kept"
    print(f"Digit {cfg.mnist_digit}: {len(images)} images, {sampling}")

    out = Path(cfg.out_dir)
    report = train(loss, net, bank, dataset, cfg.seed, config_text=cfg.to_text())
    checkpoint = out / CHECKPOINT_FILE
    save_checkpoint(checkpoint, net, bank, cfg.seed, 0, cfg.to_text())
    history = out / "history.csv"
    report.to_csv(history)
    latents = out / "latents.csv"
    bank.export_csv(latents)

    truth = images[:, None]
    recon = reconstruct_series(net, bank, 0)
    zero_filled = np.stack([frame.operator.adjoint(frame.b).numpy() for frame in dataset.frames])[:, None]
    recon_metrics = evaluate_series(recon, truth, metrics=("psnr", "ssim"))
    zf_metrics = evaluate_series(zero_filled, truth, metrics=("psnr", "ssim"))
    metrics = out / "metrics.csv"
    recon_metrics.to_csv(metrics)
    zf_path = out / "metrics_zero_filled.csv"
    zf_metrics.to_csv(zf_path)

    shown = min(16, len(images))
    ext = cfg.image_format
    outputs = [checkpoint, history, latents, metrics, zf_path]
    outputs.append(save_image(out / f"original.{ext}", montage([x[0] for x in images[:shown]]), -1.0, 1.0))
    if not cfg.mnist_fully_sampled:
        outputs.append(
            save_image(out / f"zero_filled.{ext}", montage([x[0, 0] for x in zero_filled[:shown]]), -1.0, 1.0)
        )
    outputs.append(save_image(out / f"reconstruction.{ext}", montage([x[0, 0] for x in recon[:shown]]), -1.0, 1.0))

    g = cfg.grid_resolution
    axis = np.linspace(-3.0, 3.0, g)
    grid = torch.as_tensor([[a, b] for a in axis for b in axis], dtype=torch.float64)
    with torch.no_grad():
        tiles = net(grid).numpy()
    outputs.append(save_image(out / f"manifold.{ext}", montage([x[0] for x in tiles], columns=g), -1.0, 1.0))
    _manifest("mnist", cfg, config_path, [images_path, labels_path], outputs, checkpoint)

    print("\nResults:")
    print(f"  PSNR  recon={recon_metrics.aggregate('psnr'):.2f} dB  zero-filled={zf_metrics.aggregate('psnr'):.2f} dB")
    print(f"  SSIM  recon={recon_metrics.aggregate('ssim'):.4f}     zero-filled={zf_metrics.aggregate('ssim'):.4f}")
    print(f"  Manifold grid: {g}x{g} tiles over [-3, 3]^2")
    print(f"\nOutputs in: {out}")
    return recon_metrics


def cmd_help(cfg=None, config_path=None):
    print(__doc__)


def _parser():
    parser = argparse.ArgumentParser(prog="vstorm", add_help=False)
    parser.add_argument("command")
    parser.add_argument("--config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out", dest="out_dir")
    parser.add_argument("--dataset", dest="dataset_path")
    parser.add_argument("--mode", choices=MODES)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--checkpoint", dest="checkpoint_path")
    parser.add_argument("--source-slice", dest="source_slice", type=int)
    parser.add_argument("--slice", dest="train_slice", type=int)
    parser.add_argument("--fully-sampled", dest="mnist_fully_sampled", action="store_true", default=None)
    parser.add_argument("--grid", dest="grid_resolution", type=int)
    parser.add_argument("--mnist-dir", dest="mnist_dir")
    parser.add_argument("--download", dest="mnist_download", action="store_true", default=None)
    return parser


def _overrides(args):
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    if "epochs" in overrides:
        overrides["mnist_epochs"] = overrides["epochs"]
    return overrides


def _configure_threads(threads):
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(threads == 1, warn_only=True)


def main(argv=None):
    commands = {
        "make-phantom": cmd_make_phantom,
        "train": cmd_train,
        "reconstruct": cmd_reconstruct,
        "calibrate": cmd_calibrate,
        "mnist": cmd_mnist,
        "help": cmd_help,
        "--help": cmd_help,
        "-h": cmd_help,
    }

    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        cmd_help()
        return 2

    cmd = argv[0].lower()
    if cmd not in commands:
        print(f"Unknown command: {cmd}")
        cmd_help()
        return 2
    if commands[cmd] is cmd_help:
        cmd_help()
        return 0

    try:
        args = _parser().parse_args(argv)
    except SystemExit:
        return 2

    try:
        cfg = load_config(args.config, _overrides(args))
        _configure_threads(cfg.threads)
        commands[cmd](cfg, args.config)
    except (UsageError, ContainerError, IdxFormatError) as e:
        logger.error(f"Error: {e}")
        return 2
    except NonFiniteLossError as e:
        logger.error(f"Error: {e}")
        return 1
    except ValueError as e:
        logger.error(f"Invalid settings: {e}")
        return 2
    except KeyboardInterrupt:
        print("\nStopped.")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
