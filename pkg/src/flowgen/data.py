"""Dataset ingestion and the synthetic city used for desk-scale experiments.

A Dataset carries raw hourly flow days (days, regions, horizon, channels),
z-scored region features, a disjoint train/test region split, and flow
normalization constants computed on train regions only.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from shapely.geometry import box, shape, mapping

from . import blobio

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


class DataError(ValueError):
    pass


def zscore(values: np.ndarray, axis=0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standardize with a sigma floor so constant columns map to zeros."""
    mean = values.mean(axis=axis)
    std = np.maximum(values.std(axis=axis), SIGMA_FLOOR)
    return (values - mean) / std, mean, std


@dataclass
class Dataset:
    region_ids: list[str]
    conditions: np.ndarray          # (L, d_fea), z-scored across all regions
    feature_mean: np.ndarray
    feature_std: np.ndarray
    flow: np.ndarray                # (D, L, T, C) raw, nonnegative
    day_labels: list[str]
    train_ids: list[str]
    test_ids: list[str]
    flow_mean: np.ndarray = field(default=None)  # (C,), train regions only
    flow_std: np.ndarray = field(default=None)

    def __post_init__(self):
        train, test = set(self.train_ids), set(self.test_ids)
        if train & test:
            raise DataError(f"train/test split overlaps: {sorted(train & test)}")
        if train | test != set(self.region_ids):
            raise DataError("train/test split must cover all regions")
        if self.flow.size and self.flow.min() < 0:
            raise DataError("raw flow must be nonnegative")
        if self.flow_mean is None:
            self.flow_mean, self.flow_std = self._train_flow_stats()

    def _train_flow_stats(self) -> tuple[np.ndarray, np.ndarray]:
        channels = self.flow.shape[-1]
        if self.flow.shape[0] == 0:
            logger.warning("dataset has no usable days; flow stats default to (0, 1)")
            return np.zeros(channels), np.ones(channels)
        rows = self.rows_for(self.train_ids)
        values = self.flow[:, rows]  # (D, Ltr, T, C)
        mean = values.mean(axis=(0, 1, 2))
        std = np.maximum(values.std(axis=(0, 1, 2)), SIGMA_FLOOR)
        return mean, std

    @property
    def num_regions(self) -> int:
        return len(self.region_ids)

    @property
    def horizon(self) -> int:
        return self.flow.shape[2]

    @property
    def channels(self) -> int:
        return self.flow.shape[3]

    def rows_for(self, ids) -> np.ndarray:
        index = {r: i for i, r in enumerate(self.region_ids)}
        missing = [r for r in ids if r not in index]
        if missing:
            raise DataError(f"unknown region ids: {missing}")
        return np.array([index[r] for r in ids], dtype=np.int64)

    def normalized_flow(self, ids=None) -> np.ndarray:
        rows = self.rows_for(ids if ids is not None else self.region_ids)
        return ((self.flow[:, rows] - self.flow_mean) / self.flow_std).astype(np.float32)

    def conditions_for(self, ids) -> np.ndarray:
        return self.conditions[self.rows_for(ids)]

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        """Back to raw space, clamped at zero."""
        return np.maximum(values * self.flow_std + self.flow_mean, 0.0)

    def save(self, path) -> None:
        manifest = {
            "region_ids": self.region_ids,
            "day_labels": self.day_labels,
            "train_ids": self.train_ids,
            "test_ids": self.test_ids,
        }
        arrays = {
            "conditions": self.conditions.astype(np.float64),
            "feature_mean": self.feature_mean.astype(np.float64),
            "feature_std": self.feature_std.astype(np.float64),
            "flow": self.flow.astype(np.float64),
            "flow_mean": self.flow_mean.astype(np.float64),
            "flow_std": self.flow_std.astype(np.float64),
        }
        blobio.save_blobs(path, manifest, arrays)

    @classmethod
    def load(cls, path) -> "Dataset":
        manifest, arrays = blobio.load_blobs(path)
        return cls(
            region_ids=list(manifest["region_ids"]),
            conditions=arrays["conditions"],
            feature_mean=arrays["feature_mean"],
            feature_std=arrays["feature_std"],
            flow=arrays["flow"],
            day_labels=list(manifest["day_labels"]),
            train_ids=list(manifest["train_ids"]),
            test_ids=list(manifest["test_ids"]),
            flow_mean=arrays["flow_mean"],
            flow_std=arrays["flow_std"],
        )


@dataclass
class IngestReport:
    dropped_days: list[str] = field(default_factory=list)
    weekend_days: list[str] = field(default_factory=list)
    used_days: list[str] = field(default_factory=list)


def load_region_geometries(geo_file) -> dict:
    with open(geo_file, encoding="utf-8") as fh:
        collection = json.load(fh)
    geometries = {}
    for feature in collection["features"]:
        rid = str(feature["properties"]["region_id"])
        geometries[rid] = shape(feature["geometry"])
    return geometries


def ingest(flow_csv, features_csv, geo_file, split_file) -> tuple[Dataset, IngestReport]:
    """Assemble a Dataset from the standard CSV/GeoJSON inputs.

    Weekend days are filtered out; a day is kept only when every region and
    channel has all 24 hours. Flow normalization constants come from train
    regions only.
    """
    geometries = load_region_geometries(geo_file)
    region_ids = sorted(geometries)

    flow = pd.read_csv(flow_csv)
    required = {"region_id", "timestamp", "channel", "value"}
    if not required <= set(flow.columns):
        raise DataError(f"flow CSV must have columns {sorted(required)}")
    flow["region_id"] = flow["region_id"].astype(str)
    unknown = sorted(set(flow["region_id"]) - set(region_ids))
    if unknown:
        raise DataError(f"flow references regions missing from geometry: {unknown}")
    flow["timestamp"] = pd.to_datetime(flow["timestamp"])
    flow["date"] = flow["timestamp"].dt.date
    flow["hour"] = flow["timestamp"].dt.hour
    channels = sorted(flow["channel"].unique())
    n_channels = len(channels)
    chan_index = {c: k for k, c in enumerate(channels)}

    report = IngestReport()
    day_tensors, day_labels = [], []
    reg_index = {r: i for i, r in enumerate(region_ids)}
    for date, group in flow.groupby("date", sort=True):
        label = str(date)
        if pd.Timestamp(date).dayofweek >= 5:
            report.weekend_days.append(label)
            continue
        expected = len(region_ids) * n_channels * 24
        if len(group.drop_duplicates(["region_id", "channel", "hour"])) != expected:
            report.dropped_days.append(label)
            continue
        tensor = np.zeros((len(region_ids), 24, n_channels))
        for row in group.itertuples(index=False):
            tensor[reg_index[row.region_id], row.hour, chan_index[row.channel]] = row.value
        day_tensors.append(tensor)
        day_labels.append(label)
        report.used_days.append(label)
    if report.dropped_days:
        logger.warning("dropped %d day(s) with missing hours: %s",
                       len(report.dropped_days), ", ".join(report.dropped_days))
    flow_array = (np.stack(day_tensors) if day_tensors
                  else np.zeros((0, len(region_ids), 24, n_channels)))

    features = pd.read_csv(features_csv)
    features["region_id"] = features["region_id"].astype(str)
    features = features.set_index("region_id")
    missing = sorted(set(region_ids) - set(features.index))
    if missing:
        raise DataError(f"features missing for regions: {missing}")
    raw = features.loc[region_ids].to_numpy(dtype=float)
    conditions, f_mean, f_std = zscore(raw)

    with open(split_file, encoding="utf-8") as fh:
        split = json.load(fh)
    test_ids = [str(r) for r in split["test_regions"]]
    bad = sorted(set(test_ids) - set(region_ids))
    if bad:
        raise DataError(f"split references unknown regions: {bad}")
    train_ids = [r for r in region_ids if r not in set(test_ids)]

    dataset = Dataset(region_ids, conditions, f_mean, f_std, flow_array,
                      day_labels, train_ids, test_ids)
    return dataset, report


def _largest_remainder(weights: np.ndarray, total: int, minimum: int = 1) -> np.ndarray:
    """Integer allocation proportional to weights, each at least `minimum`."""
    n = len(weights)
    total = max(total, minimum * n)
    raw = weights / weights.sum() * (total - minimum * n)
    counts = np.floor(raw).astype(int) + minimum
    remainder = total - counts.sum()
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    counts[order[:remainder]] += 1
    return counts


CATEGORIES = ("food", "shop", "office", "park", "transit")


@dataclass
class SyntheticCity:
    """Grid city with closed-form flow and full ground truth.

    Regions are square cells ~1.1 km on a side so grid neighbors border each
    other and diagonal neighbors fall inside the default NearBy threshold.
    Flow is a daily sinusoid with per-region amplitude and phase plus a
    neighbor-coupled term and proportional noise:

        flow_l(t) = A_l (1 + sin(2 pi t / 24 + phase_l))
                    + coupling * mean_{j ~ l} A_j (1 + sin(2 pi t / 24 + phase_j))
                    + noise_scale * A_l * eps(t)

    One region feature equals the amplitude exactly, so flow volume is
    recoverable from features by construction.
    """

    region_ids: list[str]
    geometries: dict
    pois: pd.DataFrame
    features_raw: np.ndarray
    flow_hours: np.ndarray          # (L, total_hours, C) raw
    day_labels: list[str]
    train_ids: list[str]
    test_ids: list[str]
    truth: dict

    @property
    def num_days(self) -> int:
        return self.flow_hours.shape[1] // 24

    def day_array(self) -> np.ndarray:
        """(D, L, 24, C) raw flow days."""
        L, H, C = self.flow_hours.shape
        days = self.flow_hours.reshape(L, H // 24, 24, C)
        return np.transpose(days, (1, 0, 2, 3)).copy()

    def dataset(self) -> Dataset:
        conditions, f_mean, f_std = zscore(self.features_raw)
        return Dataset(self.region_ids, conditions, f_mean, f_std,
                       self.day_array(), self.day_labels,
                       self.train_ids, self.test_ids)

    def windows(self, t_in: int = 12, t_out: int = 12, stride: int = 6) -> np.ndarray:
        """(W, L, t_in + t_out, C) sliding windows over the continuous hours."""
        length = t_in + t_out
        H = self.flow_hours.shape[1]
        starts = range(0, H - length + 1, stride)
        return np.stack([self.flow_hours[:, s:s + length] for s in starts])

    def write(self, directory) -> None:
        """Emit the standard ingestion files plus ground_truth.json."""
        os.makedirs(directory, exist_ok=True)
        features = {
            "type": "FeatureCollection",
            "features": [
                {"type": "Feature", "properties": {"region_id": rid},
                 "geometry": mapping(self.geometries[rid])}
                for rid in self.region_ids
            ],
        }
        blobio.atomic_write_text(os.path.join(directory, "regions.geojson"),
                                 json.dumps(features))
        self.pois.to_csv(os.path.join(directory, "pois.csv"), index=False)
        feat = pd.DataFrame(self.features_raw,
                            columns=[f"feat{k}" for k in range(self.features_raw.shape[1])])
        feat.insert(0, "region_id", self.region_ids)
        feat.to_csv(os.path.join(directory, "features.csv"), index=False)
        records = []
        L, H, C = self.flow_hours.shape
        dates = pd.to_datetime(self.day_labels)
        for d in range(H // 24):
            for hour in range(24):
                ts = dates[d] + pd.Timedelta(hours=hour)
                for i, rid in enumerate(self.region_ids):
                    for c in range(C):
                        records.append((rid, ts.isoformat(), c,
                                        float(self.flow_hours[i, d * 24 + hour, c])))
        pd.DataFrame(records, columns=["region_id", "timestamp", "channel", "value"]) \
            .to_csv(os.path.join(directory, "flow.csv"), index=False)
        blobio.atomic_write_text(os.path.join(directory, "split.json"),
                                 json.dumps({"test_regions": self.test_ids}))
        blobio.atomic_write_text(os.path.join(directory, "ground_truth.json"),
                                 json.dumps(self.truth, indent=2, sort_keys=True))


def weekday_labels(num_days: int, start: str = "2024-01-01") -> list[str]:
    """Consecutive weekday dates starting from a Monday."""
    labels = []
    current = pd.Timestamp(start)
    while len(labels) < num_days:
        if current.dayofweek < 5:
            labels.append(str(current.date()))
        current += pd.Timedelta(days=1)
    return labels


def make_synthetic(
    num_regions: int = 8,
    horizon: int = 24,
    num_days: int = 40,
    seed: int = 0,
    channels: int = 1,
    amplitude_range: tuple[float, float] = (30.0, 300.0),
    coupling: float = 0.2,
    noise_scale: float = 0.05,
    num_pois: int = 30,
    num_features: int = 3,
    test_fraction: float = 0.25,
    cell_degrees: float = 0.01,
) -> SyntheticCity:
    if num_regions < 2:
        raise DataError("need at least 2 regions")
    if horizon != 24:
        raise DataError("synthetic generator models daily cycles; horizon must be 24")
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(num_regions)))
    region_ids = [f"R{k:02d}" for k in range(num_regions)]
    geometries, centers = {}, {}
    for k, rid in enumerate(region_ids):
        row, col = divmod(k, side)
        geometries[rid] = box(col * cell_degrees, row * cell_degrees,
                              (col + 1) * cell_degrees, (row + 1) * cell_degrees)
        centers[rid] = (row, col)

    amplitudes = np.geomspace(amplitude_range[0], amplitude_range[1], num_regions)
    amplitudes = amplitudes[rng.permutation(num_regions)]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=num_regions)

    # 4-adjacency on the grid, matching the BorderBy relation.
    adj = np.zeros((num_regions, num_regions))
    for i in range(num_regions):
        for j in range(num_regions):
            (ri, ci), (rj, cj) = centers[region_ids[i]], centers[region_ids[j]]
            if abs(ri - rj) + abs(ci - cj) == 1:
                adj[i, j] = 1.0
    degree = np.maximum(adj.sum(axis=1), 1.0)

    hours = np.arange(num_days * 24)
    tod = 2.0 * np.pi * (hours % 24) / 24.0
    flow = np.zeros((num_regions, len(hours), channels))
    true_mean = np.zeros((num_regions, channels))
    for c in range(channels):
        offset = c * np.pi / 3.0
        base = amplitudes[:, None] * (1.0 + np.sin(tod[None, :] + phases[:, None] + offset))
        coupled = base + coupling * (adj @ base) / degree[:, None]
        noise = rng.normal(size=base.shape) * (noise_scale * amplitudes[:, None])
        flow[:, :, c] = np.maximum(coupled + noise, 0.0)
        true_mean[:, c] = amplitudes + coupling * (adj @ amplitudes) / degree

    poi_counts = _largest_remainder(amplitudes, num_pois)
    rank = np.argsort(np.argsort(amplitudes)) / max(num_regions - 1, 1)
    poi_rows = []
    for i, rid in enumerate(region_ids):
        dominant = int(round(rank[i] * (len(CATEGORIES) - 1)))
        probs = np.full(len(CATEGORIES), 0.4 / (len(CATEGORIES) - 1))
        probs[dominant] = 0.6
        geom = geometries[rid]
        lon0, lat0, lon1, lat1 = geom.bounds
        for _ in range(int(poi_counts[i])):
            cat = CATEGORIES[rng.choice(len(CATEGORIES), p=probs)]
            brand = rng.choice(["alpha", "beta", ""], p=[0.1, 0.1, 0.8])
            poi_rows.append((f"P{len(poi_rows):03d}",
                             rng.uniform(lon0, lon1), rng.uniform(lat0, lat1),
                             cat, brand))
    pois = pd.DataFrame(poi_rows, columns=["poi_id", "lon", "lat", "category", "brand"])

    features = np.zeros((num_regions, max(num_features, 1)))
    features[:, 0] = amplitudes
    if num_features > 1:
        features[:, 1] = poi_counts
    if num_features > 2:
        features[:, 2:] = rng.normal(size=(num_regions, num_features - 2))

    n_test = int(round(test_fraction * num_regions)) if test_fraction > 0 else 0
    if test_fraction > 0:
        n_test = max(1, n_test)
    by_amplitude = np.argsort(amplitudes)
    step = max(1, num_regions // max(n_test, 1))
    test_idx = sorted(by_amplitude[::step][:n_test].tolist())
    test_ids = [region_ids[i] for i in test_idx]
    train_ids = [r for r in region_ids if r not in set(test_ids)]

    truth = {
        "seed": seed,
        "amplitudes": amplitudes.tolist(),
        "phases": phases.tolist(),
        "coupling": coupling,
        "noise_scale": noise_scale,
        "true_mean": true_mean.tolist(),
        "region_ids": region_ids,
    }
    return SyntheticCity(region_ids, geometries, pois, features, flow,
                         weekday_labels(num_days), train_ids, test_ids, truth)
