"""On-disk synthetic datasets: skeleton, JSON-lines pose records, image volumes.

A dataset directory holds ``skeleton.json``, ``train.jsonl``/``test.jsonl``
and ``train_images.vol``/``test_images.vol``. Images use the volume format
with ``d = 1`` and one channel per sample, in record order.
"""
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch
from .heatmap import HeatmapVolume, read_volume, write_volume
from .skeleton import Pose2D, Pose3D, Skeleton, pose_record, read_pose_records, write_pose_records
from .trainer import assemble_sample

SPLITS = ("train", "test")


def save_dataset(out_dir, skeleton, train, test):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    skeleton.save(out / "skeleton.json")
    for name, samples in zip(SPLITS, (train, test)):
        write_pose_records(out / f"{name}.jsonl", [
            pose_record(s.id, s.pose3d, s.pose2d, noise_seed=s.noise_seed) for s in samples
        ])
        images = np.stack([s.image[0] for s in samples]).astype(np.float32)
        write_volume(out / f"{name}_images.vol", HeatmapVolume.from_chw(images, 1, len(samples)))


def load_split(data_dir, split, skeleton, config):
    data = Path(data_dir)
    records = read_pose_records(data / f"{split}.jsonl")
    vol = read_volume(data / f"{split}_images.vol")
    if vol.n_joints != len(records):
        raise ShapeMismatch(f"{split}: {len(records)} records but {vol.n_joints} images")
    if vol.w != config.image_size or vol.h != config.image_size:
        raise ShapeMismatch(f"{split}: images are {vol.w}x{vol.h}, config expects {config.image_size}")
    images = vol.to_chw()
    out = []
    for i, rec in enumerate(records):
        pose3d = Pose3D(rec["coords_mm"])
        if pose3d.coords.shape[0] != skeleton.n_joints:
            raise ShapeMismatch(f"record {rec['id']} has {pose3d.coords.shape[0]} joints")
        pose2d = Pose2D(rec["coords_px"], tuple(rec["bbox_px"]))
        out.append(assemble_sample(rec["id"], skeleton, pose3d, pose2d, images[i], config,
                                   rec.get("noise_seed", 0)))
    return out


def load_dataset(data_dir, config):
    skeleton = Skeleton.load(Path(data_dir) / "skeleton.json")
    return skeleton, load_split(data_dir, "train", skeleton, config), load_split(data_dir, "test", skeleton, config)
