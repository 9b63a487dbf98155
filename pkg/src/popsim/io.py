"""Population and sample files.

CSV is the interchange format: header ``id`` plus variable names, floats
written with ``repr`` so they read back bit-exactly.  The binary format is
little-endian and columnar::

    b"PSIM1"  u32 ncols  u64 nrows
    ncols x (u16 name length, utf-8 name)
    nrows x u64 ids
    ncols x (nrows x f64)

A sample file uses the magic ``b"PSMS1"`` and follows every column with its
NA bitmask plane (``ceil(nrows / 8)`` bytes, least significant bit first).
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .domain import DomainError, Population, SimulationDomain
from .sampler import Sample

MAGIC = b"PSIM1"
SAMPLE_MAGIC = b"PSMS1"
NA = "NA"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_population_csv(path, pop: Population) -> None:
    names = list(pop)
    cols = [pop[k] for k in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names])
        for i in range(pop.n):
            w.writerow([int(pop.ids[i]), *(_fmt(c[i]) for c in cols)])


def _read_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise ValueError(f"{path}: first column must be 'id'")
        rows = list(reader)
    return header[1:], rows


def read_population_csv(path, domain: SimulationDomain) -> Population:
    names, rows = _read_table(path)
    if set(names) != set(domain.names):
        raise DomainError(f"{path}: columns {names} do not match the domain")
    ids = np.array([int(r[0]) for r in rows], dtype=np.uint64)
    cols = {k: np.array([float(r[j + 1]) for r in rows], dtype=np.float64) for j, k in enumerate(names)}
    return Population(domain, cols, ids)


def _header(magic: bytes, names, n: int) -> bytes:
    parts = [magic, struct.pack("<IQ", len(names), n)]
    for k in names:
        b = k.encode("utf-8")
        parts.append(struct.pack("<H", len(b)) + b)
    return b"".join(parts)


def write_population_binary(path, pop: Population) -> None:
    names = list(pop)
    with open(path, "wb") as fh:
        fh.write(_header(MAGIC, names, pop.n))
        fh.write(pop.ids.astype("<u8").tobytes())
        for k in names:
            fh.write(pop[k].astype("<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise ValueError("truncated file")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out

    def header(self, magic: bytes):
        if self.take(len(magic)) != magic:
            raise ValueError(f"not a {magic.decode()} file")
        ncols, n = struct.unpack("<IQ", self.take(12))
        names = [self.take(struct.unpack("<H", self.take(2))[0]).decode("utf-8") for _ in range(ncols)]
        return names, n


def read_population_binary(path, domain: SimulationDomain) -> Population:
    r = _Reader(Path(path).read_bytes())
    names, n = r.header(MAGIC)
    ids = np.frombuffer(r.take(8 * n), dtype="<u8").astype(np.uint64)
    cols = {k: np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64) for k in names}
    return Population(domain, cols, ids)


# -- samples -------------------------------------------------------------------

def write_sample_csv(path, sample: Sample) -> None:
    names = list(sample.columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names])
        for i in range(sample.n):
            w.writerow([int(sample.ids[i]),
                        *(NA if sample.mask[k][i] else _fmt(sample.values[k][i]) for k in names)])


def read_sample_csv(path, design_path=None) -> Sample:
    """Masked cells read back as NaN values with the mask set."""
    names, rows = _read_table(path)
    ids = np.array([int(r[0]) for r in rows], dtype=np.uint64)
    mask = {k: np.array([r[j + 1] == NA for r in rows], dtype=bool) for j, k in enumerate(names)}
    values = {k: np.array([np.nan if r[j + 1] == NA else float(r[j + 1]) for r in rows])
              for j, k in enumerate(names)}
    participated = np.ones(ids.shape[0], dtype=bool)
    if design_path is not None:
        meta = read_design_csv(design_path)
        participated = np.array([meta[int(i)][1] for i in ids], dtype=bool)
    return Sample(ids, values, mask, participated)


def write_design_csv(path, sample: Sample) -> None:
    """Sidecar with one row per invitee: id, invited, participated."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "invited", "participated"])
        for i, p in zip(sample.ids, sample.participated):
            w.writerow([int(i), 1, int(p)])


def read_design_csv(path) -> Mapping[int, tuple[bool, bool]]:
    with open(path, newline="") as fh:
        return {int(r["id"]): (r["invited"] == "1", r["participated"] == "1") for r in csv.DictReader(fh)}


def write_sample_binary(path, sample: Sample) -> None:
    names = list(sample.columns)
    with open(path, "wb") as fh:
        fh.write(_header(SAMPLE_MAGIC, names, sample.n))
        fh.write(sample.ids.astype("<u8").tobytes())
        fh.write(np.packbits(sample.participated, bitorder="little").tobytes())
        for k in names:
            fh.write(np.asarray(sample.values[k], dtype="<f8").tobytes())
            fh.write(np.packbits(sample.mask[k], bitorder="little").tobytes())


def read_sample_binary(path) -> Sample:
    r = _Reader(Path(path).read_bytes())
    names, n = r.header(SAMPLE_MAGIC)
    nbytes = (n + 7) // 8

    def bits():
        return np.unpackbits(np.frombuffer(r.take(nbytes), dtype=np.uint8), count=n, bitorder="little").astype(bool)

    ids = np.frombuffer(r.take(8 * n), dtype="<u8").astype(np.uint64)
    participated = bits()
    values, mask = {}, {}
    for k in names:
        values[k] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
        mask[k] = bits()
    return Sample(ids, values, mask, participated)
