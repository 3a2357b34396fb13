"""Dataset manifest: one TSV row per clip with file paths, duration and a content checksum."""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass

from .wavio import read_wav_info

COLUMNS = ("id", "split", "path_714", "path_stereo", "path_latent_714", "path_latent_stereo",
           "duration", "checksum")
TEST_FRACTION = 10  # percent


class ManifestError(ValueError):
    pass


def split_of(clip_id: str) -> str:
    """Deterministic 90/10 split from the SHA-256 of the clip id."""
    bucket = int.from_bytes(hashlib.sha256(clip_id.encode("utf-8")).digest()[:8], "little") % 100
    return "test" if bucket < TEST_FRACTION else "train"


def checksum(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


@dataclass
class ManifestEntry:
    id: str
    split: str
    path_714: str
    path_stereo: str
    path_latent_714: str
    path_latent_stereo: str
    duration: float
    checksum: str

    @property
    def files(self) -> tuple[str, str, str, str]:
        return (self.path_714, self.path_stereo, self.path_latent_714, self.path_latent_stereo)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: str = "."

    def resolve(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(COLUMNS)
            for e in sorted(self.entries, key=lambda e: e.id):
                w.writerow([e.id, e.split, *e.files, repr(e.duration), e.checksum])

    def verify(self) -> None:
        """Every file exists, checksums match and both sides have the same duration."""
        for e in self.entries:
            paths = [self.resolve(p) for p in e.files]
            missing = [p for p in paths if not os.path.exists(p)]
            if missing:
                raise ManifestError(f"{e.id}: missing {missing}")
            if checksum(paths) != e.checksum:
                raise ManifestError(f"{e.id}: checksum mismatch")
            a, b = read_wav_info(paths[0]), read_wav_info(paths[1])
            if a.num_frames != b.num_frames or a.sample_rate != b.sample_rate:
                raise ManifestError(f"{e.id}: stereo and 7.1.4 durations differ")


def read_manifest(path: str | os.PathLike, verify: bool = True) -> DatasetManifest:
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ManifestError(f"{path}: bad header")
    entries = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(COLUMNS):
            raise ManifestError(f"{path}:{i}: expected {len(COLUMNS)} fields, got {len(row)}")
        entries.append(ManifestEntry(*row[:6], float(row[6]), row[7]))
    m = DatasetManifest(entries, os.path.dirname(os.path.abspath(path)))
    if verify:
        m.verify()
    return m
