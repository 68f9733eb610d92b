"""Keyframe database standing in for appearance-based 2D-to-2D matching.

Retrieval and descriptor matching are replaced by ground-truth feature ids:
a keyframe is retrieved by id overlap with the current frame and the
current observations whose ids it stores are paired with map features,
each kept with probability ``recall``. An optional outlier rate pairs an
observation with a wrong map feature instead.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Keyframe:
    id: int
    timestamp: float
    q: np.ndarray
    p: np.ndarray
    bearings: dict = field(default_factory=dict)  # feature id -> Bearing

    @property
    def feature_ids(self):
        return set(self.bearings)


@dataclass
class AssocResult:
    pairs: list = field(default_factory=list)  # (Bearing, schmidt feature id)
    keyframe_id: int = None

    def by_observation(self):
        return {b.feature_id: fid for b, fid in self.pairs}


class KeyframeDatabase:
    def __init__(self, insert_min=5, period=1.0, min_overlap=3):
        self.insert_min = insert_min
        self.period = period
        self.min_overlap = min_overlap
        self.keyframes = []
        self._next_id = 0
        self._last_insert = -np.inf

    def __len__(self):
        return len(self.keyframes)

    def query(self, current_ids):
        """Keyframe sharing the most ids with ``current_ids``, or None."""
        current_ids = set(current_ids)
        best, best_overlap = None, -1
        for kf in self.keyframes:
            n = len(current_ids & kf.feature_ids)
            # later keyframes win ties
            if n >= best_overlap:
                best, best_overlap = kf, n
        if best is None or best_overlap < self.min_overlap:
            return None
        return best

    def maintain(self, state, observations, timestamp):
        """Keyframe insertion and pruning after an image.

        Stored ids are limited to features in the map or active as SLAM
        features, since the latter become map features once their track ends.
        """
        mapped = state.schmidt_ids() | state.active_ids()
        for kf in self.keyframes:
            for fid in list(kf.bearings):
                if fid not in mapped:
                    del kf.bearings[fid]
        self.keyframes = [kf for kf in self.keyframes if kf.bearings]

        visible = {b.feature_id: b for b in observations if b.feature_id in mapped}
        if len(visible) >= self.insert_min and timestamp - self._last_insert >= self.period - 1e-9:
            imu = state.imu
            self.keyframes.append(Keyframe(self._next_id, timestamp, imu.q.copy(), imu.p.copy(), visible))
            self._next_id += 1
            self._last_insert = timestamp
        return self


def match(observations, kf, recall, rng, schmidt_ids=None, outlier_rate=0.0):
    """Pair current observations with map features stored in ``kf``."""
    if not 0.0 <= recall <= 1.0:
        raise ValueError("recall must lie in [0, 1]")
    if kf is None:
        return AssocResult()
    candidates = kf.feature_ids
    if schmidt_ids is not None:
        candidates = candidates & set(schmidt_ids)
    pool = sorted(schmidt_ids) if schmidt_ids is not None else sorted(candidates)
    pairs = []
    used = set()
    for b in observations:
        if b.feature_id not in candidates:
            continue
        if recall < 1.0 and rng.random() >= recall:
            continue
        target = b.feature_id
        if outlier_rate > 0.0 and rng.random() < outlier_rate and len(pool) > 1:
            wrong = [f for f in pool if f != target and f not in used]
            if wrong:
                target = wrong[int(rng.integers(len(wrong)))]
        if target in used:
            continue
        used.add(target)
        pairs.append((b, target))
    return AssocResult(pairs, kf.id)
