"""Urban knowledge graph construction.

Entities are regions, POIs, POI categories and business areas; relations
follow the nine fixed signatures below. Relation builders are pure functions
over immutable inputs and emit (head, relation, tail) string triplets;
`UrbanKG` assembles and validates the final graph.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from shapely.geometry import Point
from shapely.geometry.base import BaseGeometry

logger = logging.getLogger(__name__)

Fact = tuple[str, str, str]

ENTITY_KINDS = ("Region", "POI", "Category", "BusinessArea")

EARTH_RADIUS_KM = 6371.0088


class UkgError(ValueError):
    pass


class InvalidGeometryError(UkgError):
    def __init__(self, region_ids: Sequence[str]):
        self.region_ids = list(region_ids)
        super().__init__(f"invalid geometry for regions: {', '.join(self.region_ids)}")


class UnknownEntityError(UkgError):
    pass


@dataclass(frozen=True)
class Entity:
    id: str
    kind: str

    def __post_init__(self):
        if self.kind not in ENTITY_KINDS:
            raise UkgError(f"unknown entity kind {self.kind!r} for {self.id!r}")


@dataclass(frozen=True)
class RelationType:
    name: str
    head_kind: str
    tail_kind: str
    symmetric: bool


RELATIONS: dict[str, RelationType] = {
    r.name: r
    for r in (
        RelationType("BorderBy", "Region", "Region", True),
        RelationType("NearBy", "Region", "Region", True),
        RelationType("CoCheckin", "POI", "POI", True),
        RelationType("Competitive", "POI", "POI", True),
        RelationType("SimilarFunc", "Region", "Region", True),
        RelationType("LocateAt", "POI", "Region", False),
        RelationType("CateOf", "POI", "Category", False),
        RelationType("ProvideService", "BusinessArea", "Region", False),
        RelationType("BelongTo", "POI", "BusinessArea", False),
    )
}

# Region-to-region relations used by the spatial block of the denoiser.
REGION_RELATIONS = ("BorderBy", "NearBy", "SimilarFunc")


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in km; accepts scalars or numpy arrays."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=float)) for v in (lon1, lat1, lon2, lat2))
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _both_directions(a: str, relation: str, b: str) -> list[Fact]:
    return [(a, relation, b), (b, relation, a)]


def build_border_relations(geometries: Mapping[str, BaseGeometry]) -> set[Fact]:
    """BorderBy facts for region pairs whose boundaries share positive length.

    Pairs that only touch at a corner (point intersection) are excluded.
    Raises InvalidGeometryError listing every invalid region.
    """
    invalid = sorted(rid for rid, geom in geometries.items() if geom is None or not geom.is_valid)
    if invalid:
        raise InvalidGeometryError(invalid)
    ids = sorted(geometries)
    facts: set[Fact] = set()
    for i, a in enumerate(ids):
        ga = geometries[a]
        for b in ids[i + 1:]:
            gb = geometries[b]
            if not ga.intersects(gb):
                continue
            shared = ga.boundary.intersection(gb.boundary)
            if shared.length > 0.0:
                facts.update(_both_directions(a, "BorderBy", b))
    return facts


def build_nearby_relations(
    centroids: Mapping[str, tuple[float, float]],
    threshold_km: float,
    border_facts: Iterable[Fact] = (),
) -> set[Fact]:
    """NearBy facts for pairs within `threshold_km` (closed inequality),
    skipping pairs already related by BorderBy."""
    if threshold_km <= 0:
        raise UkgError("threshold_km must be positive")
    bordered = {(h, t) for h, r, t in border_facts if r == "BorderBy"}
    ids = sorted(centroids)
    lons = np.array([centroids[r][0] for r in ids])
    lats = np.array([centroids[r][1] for r in ids])
    facts: set[Fact] = set()
    for i, a in enumerate(ids):
        if i + 1 == len(ids):
            break
        dists = haversine_km(lons[i], lats[i], lons[i + 1:], lats[i + 1:])
        for j, d in zip(range(i + 1, len(ids)), dists):
            b = ids[j]
            if d <= threshold_km and (a, b) not in bordered:
                facts.update(_both_directions(a, "NearBy", b))
    return facts


def cosine_similarity_matrix(counts: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(counts, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = counts / safe[:, None]
    return unit @ unit.T


def build_similarfunc_relations(
    region_ids: Sequence[str],
    poi_category_counts: np.ndarray,
    top_k: int = 10,
) -> set[Fact]:
    """SimilarFunc facts linking each region to its top-k most cosine-similar
    peers by POI category distribution; symmetrized by union."""
    counts = np.asarray(poi_category_counts, dtype=float)
    if counts.ndim != 2 or counts.shape[0] != len(region_ids):
        raise UkgError("poi_category_counts must be (num_regions, num_categories)")
    if np.any(counts < 0):
        raise UkgError("poi_category_counts must be nonnegative")
    if top_k < 1:
        raise UkgError("top_k must be >= 1")
    active = np.linalg.norm(counts, axis=1) > 0
    skipped = [region_ids[i] for i in np.flatnonzero(~active)]
    if skipped:
        logger.warning("SimilarFunc: skipping %d region(s) with no POIs: %s",
                       len(skipped), ", ".join(skipped))
    sim = cosine_similarity_matrix(counts)
    facts: set[Fact] = set()
    for i, rid in enumerate(region_ids):
        if not active[i]:
            continue
        order = [j for j in np.argsort(-sim[i], kind="stable") if j != i and active[j]]
        for j in order[:top_k]:
            facts.update(_both_directions(rid, "SimilarFunc", region_ids[j]))
    return facts


@dataclass
class ContainmentReport:
    num_pois: int = 0
    outside_pois: list[str] = field(default_factory=list)

    @property
    def num_outside(self) -> int:
        return len(self.outside_pois)


def build_containment_relations(
    pois,
    region_geometries: Mapping[str, BaseGeometry],
    business_areas: Mapping[str, BaseGeometry] | None = None,
) -> tuple[set[Fact], ContainmentReport]:
    """LocateAt/CateOf facts per POI, plus ProvideService/BelongTo when
    business-area polygons are supplied.

    `pois` is a DataFrame-like table with columns poi_id, lon, lat, category.
    A POI on a shared border is assigned to the lowest region id. POIs outside
    all regions emit no facts and are listed in the report.
    """
    report = ContainmentReport()
    facts: set[Fact] = set()
    region_ids = sorted(region_geometries)
    for row in pois.itertuples(index=False):
        report.num_pois += 1
        point = Point(float(row.lon), float(row.lat))
        containing = [rid for rid in region_ids if region_geometries[rid].covers(point)]
        if not containing:
            report.outside_pois.append(str(row.poi_id))
            continue
        region = min(containing)
        pid = str(row.poi_id)
        facts.add((pid, "LocateAt", region))
        facts.add((pid, "CateOf", str(row.category)))
        if business_areas:
            for ba_id in sorted(business_areas):
                if business_areas[ba_id].covers(point):
                    facts.add((pid, "BelongTo", ba_id))
    if business_areas:
        for ba_id in sorted(business_areas):
            ba = business_areas[ba_id]
            for rid in region_ids:
                inter = ba.intersection(region_geometries[rid])
                if inter.area > 0.0:
                    facts.add((ba_id, "ProvideService", rid))
    if report.outside_pois:
        logger.warning("containment: %d POI(s) outside all regions omitted", report.num_outside)
    return facts, report


def build_checkin_relations(
    checkins,
    pois,
    distance_threshold_km: float = 1.0,
    window_hours: float = 24.0,
) -> set[Fact]:
    """CoCheckin facts for POIs visited consecutively by one user within
    `window_hours`, and Competitive facts for same-brand POI pairs within
    `distance_threshold_km`. Both symmetric. Missing check-in data (None or
    empty) yields an empty set, matching cities without such records.
    """
    facts: set[Fact] = set()
    if checkins is not None and len(checkins):
        ordered = checkins.sort_values(["user_id", "timestamp"], kind="stable")
        window = np.timedelta64(int(window_hours * 3600), "s")
        for _, seq in ordered.groupby("user_id", sort=False):
            pids = seq["poi_id"].astype(str).to_numpy()
            times = seq["timestamp"].to_numpy()
            for k in range(len(pids) - 1):
                if pids[k] == pids[k + 1]:
                    continue
                if times[k + 1] - times[k] <= window:
                    facts.update(_both_directions(pids[k], "CoCheckin", pids[k + 1]))
    if pois is not None and "brand" in getattr(pois, "columns", ()):
        branded = pois[pois["brand"].notna() & (pois["brand"].astype(str) != "")]
        for _, group in branded.groupby("brand", sort=True):
            rows = list(group.itertuples(index=False))
            for i in range(len(rows)):
                for j in range(i + 1, len(rows)):
                    a, b = rows[i], rows[j]
                    if str(a.poi_id) == str(b.poi_id):
                        continue
                    d = haversine_km(a.lon, a.lat, b.lon, b.lat)
                    if d <= distance_threshold_km:
                        facts.update(_both_directions(str(a.poi_id), "Competitive", str(b.poi_id)))
    return facts


class UrbanKG:
    """Validated container for entities and facts.

    Construction enforces the Table-2 style contracts: facts reference known
    entities with matching kinds, no self-loops, and symmetric relations are
    completed so (a, r, b) implies (b, r, a).
    """

    def __init__(self, entities: Iterable[Entity], facts: Iterable[Fact],
                 relations: Mapping[str, RelationType] = RELATIONS):
        self.relations = dict(relations)
        self._entities: dict[str, Entity] = {}
        for ent in entities:
            existing = self._entities.get(ent.id)
            if existing is not None and existing.kind != ent.kind:
                raise UkgError(f"entity {ent.id!r} declared with kinds "
                               f"{existing.kind} and {ent.kind}")
            self._entities[ent.id] = ent
        complete: set[Fact] = set()
        for head, rel, tail in facts:
            rtype = self.relations.get(rel)
            if rtype is None:
                raise UkgError(f"unknown relation {rel!r}")
            if head == tail:
                raise UkgError(f"self-loop fact ({head}, {rel}, {tail})")
            for eid, want in ((head, rtype.head_kind), (tail, rtype.tail_kind)):
                ent = self._entities.get(eid)
                if ent is None:
                    raise UnknownEntityError(f"fact references unknown entity {eid!r}")
                if ent.kind != want:
                    raise UkgError(f"fact ({head}, {rel}, {tail}): {eid!r} is "
                                   f"{ent.kind}, expected {want}")
            complete.add((head, rel, tail))
            if rtype.symmetric:
                complete.add((tail, rel, head))
        self._facts = frozenset(complete)

    @property
    def facts(self) -> frozenset[Fact]:
        return self._facts

    @property
    def entities(self) -> dict[str, Entity]:
        return dict(self._entities)

    def entity_ids(self) -> list[str]:
        return sorted(self._entities)

    def ids_of_kind(self, kind: str) -> list[str]:
        return sorted(eid for eid, ent in self._entities.items() if ent.kind == kind)

    def relation_names(self) -> list[str]:
        return sorted(self.relations)

    def __len__(self) -> int:
        return len(self._facts)

    def save(self, directory) -> None:
        """Write triplets.tsv and entities.tsv (UTF-8, tab-separated)."""
        from .blobio import atomic_write_text

        os.makedirs(directory, exist_ok=True)
        trip = "".join(f"{h}\t{r}\t{t}\n" for h, r, t in sorted(self._facts))
        ents = "".join(f"{eid}\t{self._entities[eid].kind}\n" for eid in self.entity_ids())
        atomic_write_text(os.path.join(directory, "triplets.tsv"), trip)
        atomic_write_text(os.path.join(directory, "entities.tsv"), ents)

    @classmethod
    def load(cls, directory) -> "UrbanKG":
        entities = []
        with open(os.path.join(directory, "entities.tsv"), encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    eid, kind = line.rstrip("\n").split("\t")
                    entities.append(Entity(eid, kind))
        facts = []
        with open(os.path.join(directory, "triplets.tsv"), encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    h, r, t = line.rstrip("\n").split("\t")
                    facts.append((h, r, t))
        return cls(entities, facts)


@dataclass(frozen=True)
class RegionSubgraph:
    """Region-region adjacency restricted to BorderBy/NearBy/SimilarFunc.

    `neighbors[k][i]` lists the region indices connected to region i via
    REGION_RELATIONS[k]; index order follows `region_ids`.
    """

    region_ids: tuple[str, ...]
    neighbors: tuple[tuple[tuple[int, ...], ...], ...]

    @property
    def num_regions(self) -> int:
        return len(self.region_ids)

    def to_dense(self) -> np.ndarray:
        """(num_relations, L, L) float32 adjacency; A[r, i, j] = 1 when j is
        an r-neighbor of i."""
        L = self.num_regions
        adj = np.zeros((len(REGION_RELATIONS), L, L), dtype=np.float32)
        for k, per_region in enumerate(self.neighbors):
            for i, nbrs in enumerate(per_region):
                for j in nbrs:
                    adj[k, i, j] = 1.0
        return adj


def extract_region_subgraph(kg: UrbanKG, region_ids: Sequence[str]) -> RegionSubgraph:
    """Restrict the KG to the given regions and the three region relations.

    Pure function of (kg, region_ids); input order is preserved.
    """
    index: dict[str, int] = {}
    for rid in region_ids:
        ent = kg.entities.get(rid)
        if ent is None:
            raise UnknownEntityError(f"unknown region id {rid!r}")
        if ent.kind != "Region":
            raise UkgError(f"entity {rid!r} is {ent.kind}, not Region")
        if rid in index:
            raise UkgError(f"duplicate region id {rid!r}")
        index[rid] = len(index)
    lists: list[list[list[int]]] = [[[] for _ in region_ids] for _ in REGION_RELATIONS]
    for head, rel, tail in kg.facts:
        if rel in REGION_RELATIONS and head in index and tail in index:
            lists[REGION_RELATIONS.index(rel)][index[head]].append(index[tail])
    neighbors = tuple(
        tuple(tuple(sorted(nbrs)) for nbrs in per_relation) for per_relation in lists
    )
    return RegionSubgraph(tuple(region_ids), neighbors)


def build_urban_kg(
    region_geometries: Mapping[str, BaseGeometry],
    pois,
    nearby_km: float = 2.0,
    similar_top_k: int = 10,
    checkins=None,
    business_areas: Mapping[str, BaseGeometry] | None = None,
    competitive_km: float = 1.0,
    checkin_window_hours: float = 24.0,
) -> tuple[UrbanKG, ContainmentReport]:
    """Assemble the full graph from geometry and POI records."""
    border = build_border_relations(region_geometries)
    centroids = {rid: (geom.centroid.x, geom.centroid.y)
                 for rid, geom in region_geometries.items()}
    nearby = build_nearby_relations(centroids, nearby_km, border)
    contain, report = build_containment_relations(pois, region_geometries, business_areas)

    region_ids = sorted(region_geometries)
    categories = sorted({str(c) for c in pois["category"]})
    cat_index = {c: k for k, c in enumerate(categories)}
    counts = np.zeros((len(region_ids), len(categories)))
    reg_index = {r: i for i, r in enumerate(region_ids)}
    poi_region = {h: t for h, r, t in contain if r == "LocateAt"}
    poi_cat = {h: t for h, r, t in contain if r == "CateOf"}
    for pid, rid in poi_region.items():
        counts[reg_index[rid], cat_index[poi_cat[pid]]] += 1
    similar = build_similarfunc_relations(region_ids, counts, similar_top_k)
    checkin = build_checkin_relations(checkins, pois, competitive_km, checkin_window_hours)

    located = {h for h, r, t in contain if r == "LocateAt"}
    entities = [Entity(r, "Region") for r in region_ids]
    entities += [Entity(p, "POI") for p in sorted(located)]
    entities += [Entity(c, "Category") for c in categories]
    if business_areas:
        entities += [Entity(b, "BusinessArea") for b in sorted(business_areas)]
    # Check-in facts may touch POIs that were dropped as outside every region.
    checkin = {(h, r, t) for h, r, t in checkin if h in located and t in located}
    kg = UrbanKG(entities, border | nearby | contain | similar | checkin)
    return kg, report
