"""
Engine Module
Session-by-session Bi-CRCL: dual learners, analytic classifiers, fused inference

Session 1:  domain alignment of the conservative learner, beta selection,
            analytic fit on conservative features
Session t>1: forward transfer -> radical training -> EMA consolidation ->
            head expansion -> analytic update of both learners
Any time:   KL-gated collaborative prediction over the classes seen so far
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .analytic import (AnalyticClassifier, ProjectionHead, SuffStats, accumulate,
                       expand_classes, fit, logits, project, select_beta)
from .backbone import Adapter, AdapterSet, FrozenBackbone
from .config import ExperimentConfig
from .errors import EmptyTaskError, StateError
from .inference import batch_divergences, fuse_batch, prediction_record
from .learners import (LearnerState, Role, consolidate_ema, expand_learner, forward_transfer,
                       train_radical, train_session_one)
from .stream import TaskData, accuracy

logger = logging.getLogger(__name__)

THREADS_ENV = "CRCL_THREADS"


def eval_threads() -> int:
    """Worker threads for divergence computation, from CRCL_THREADS (default 1)"""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        logger.warning("ignoring %s=%r (not an integer)", THREADS_ENV, raw)
        return 1
    return max(threads, 1)


class BiCRCL:
    """
    Replay-free dual-learner continual learner

    All randomness (projection head, adapter init, shuffling, augmentation)
    is drawn from one generator seeded with the experiment seed.
    """

    def __init__(self, backbone: FrozenBackbone, config: ExperimentConfig,
                 progress: bool = False):
        self.backbone = backbone
        self.config = config
        self.progress = progress
        self.rng = np.random.default_rng(config.seed)
        self.head = ProjectionHead(self._draw_projection())
        self.fusion = replace(config.fusion)
        self.fusion.reset_running()

        self.session = 0
        self.beta: Optional[float] = None
        self.conservative: Optional[LearnerState] = None
        self.radical: Optional[LearnerState] = None
        self.stats_c: Optional[SuffStats] = None
        self.stats_r: Optional[SuffStats] = None
        self.analytic_c: Optional[AnalyticClassifier] = None
        self.analytic_r: Optional[AnalyticClassifier] = None

    def _draw_projection(self) -> np.ndarray:
        embed_dim = self.backbone.embed_dim
        expansion_dim = self.config.analytic.resolve_dim(embed_dim)
        w_rand = self.rng.standard_normal((embed_dim, expansion_dim))
        w_rand.setflags(write=False)
        return w_rand

    @property
    def num_classes(self) -> int:
        return 0 if self.conservative is None else self.conservative.num_classes

    def features(self, state: LearnerState, x: np.ndarray) -> np.ndarray:
        return project(self.backbone.embed_batched(x, state.adapters), self.head)

    # ------------------------------------------------------------------
    # Training
    # ------------------------------------------------------------------

    def learn_session(self, data: TaskData):
        """
        Run one training session on the next task's split

        The split is put in sample-id order first, so the outcome depends on
        the sample set only.

        Args:
            data: Training split with incremental labels continuing the
                classes seen so far
        """
        if len(data) == 0:
            raise EmptyTaskError(f"session {self.session + 1} has no training samples")
        data = data.canonical()
        if self.session == 0:
            self._first_session(data)
        else:
            self._incremental_session(data)
        self.session += 1

    def _first_session(self, data: TaskData):
        config = self.config
        self.conservative = train_session_one(
            self.backbone, data, config.train, config.backbone.adapter_dim,
            rng=self.rng, progress=self.progress)

        embeddings = self.backbone.embed_batched(data.x, self.conservative.adapters)
        if config.analytic.beta is not None:
            self.beta = float(config.analytic.beta)
        else:
            self.beta = select_beta(embeddings, data.y, self.head, config.analytic.beta_grid,
                                    folds=config.analytic.cv_folds, seed=config.seed)

        features = project(embeddings, self.head)
        self.stats_c = accumulate(SuffStats.empty(self.head.expansion_dim,
                                                  self.conservative.num_classes),
                                  features, data.y)
        self.analytic_c = fit(self.stats_c, self.beta)
        logger.info("session 1: %d classes, beta=%g", self.num_classes, self.beta)

    def _incremental_session(self, data: TaskData):
        config = self.config
        conservative = self.conservative
        new_total = int(data.y.max()) + 1
        if new_total <= conservative.num_classes:
            raise StateError(f"session {self.session + 1} introduces no new classes")

        if self.radical is None:
            adapters = (forward_transfer(conservative) if config.consolidation.forward_transfer
                        else self.backbone.init_adapters(config.backbone.adapter_dim, self.rng))
            self.radical = LearnerState(adapters=adapters,
                                        classifier=conservative.classifier.copy(),
                                        role=Role.RADICAL)
            self.stats_r = self.stats_c.copy()
        elif config.consolidation.forward_transfer:
            self.radical.adapters = forward_transfer(conservative)

        expand_learner(self.backbone, self.radical, data)
        train_radical(self.backbone, self.radical, conservative, data, config.train,
                      rng=self.rng, progress=self.progress)

        conservative.adapters = consolidate_ema(conservative.adapters, self.radical.adapters,
                                                config.consolidation)
        expand_learner(self.backbone, conservative, data)

        self.stats_c, _ = expand_classes(self.stats_c, None, new_total)
        self.stats_c = accumulate(self.stats_c, self.features(conservative, data.x), data.y)
        self.stats_r, _ = expand_classes(self.stats_r, None, new_total)
        self.stats_r = accumulate(self.stats_r, self.features(self.radical, data.x), data.y)
        self.analytic_c = fit(self.stats_c, self.beta)
        self.analytic_r = fit(self.stats_r, self.beta)
        logger.info("session %d: %d classes, %d samples accumulated", self.session + 1,
                    new_total, self.stats_c.count)

    # ------------------------------------------------------------------
    # Inference
    # ------------------------------------------------------------------

    def logits(self, x: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Analytic logits of the conservative and (if present) radical learner"""
        if self.conservative is None:
            raise StateError("no session has been learned yet")
        z_c = logits(self.features(self.conservative, x), self.analytic_c)
        if self.radical is None:
            return z_c, None
        return z_c, logits(self.features(self.radical, x), self.analytic_r)

    def evaluate(self, test: TaskData) -> Tuple[Dict, List[Dict]]:
        """
        Collaborative prediction over a cumulative test split

        Divergences of every evaluation batch are computed first (optionally
        across CRCL_THREADS workers), then each batch is thresholded and
        fused in order. The running divergence statistics restart per call;
        a batch of one row is thresholded against them.

        Args:
            test: Cumulative test split

        Returns:
            (session metrics record, per-sample prediction records)
        """
        self.fusion.reset_running()
        z_c, z_r = self.logits(test.x)
        pred_c = np.argmax(z_c, axis=1)
        record = {
            'classes_seen': self.num_classes,
            'test_samples': len(test),
            'beta': self.beta,
            'accuracy_conservative': accuracy(pred_c, test.y),
            'accuracy_radical': None,
            'gate_rate': 0.0,
        }

        if z_r is None:
            record['accuracy'] = record['accuracy_conservative']
            record.update(self._running_record())
            predictions = [{'sample_id': int(i), 'y_star': int(y)}
                           for i, y in zip(test.ids, pred_c)]
            return record, predictions

        pred_r = np.argmax(z_r, axis=1)
        record['accuracy_radical'] = accuracy(pred_r, test.y)

        size = self.config.eval_batch_size
        starts = list(range(0, len(test), size))
        with ThreadPoolExecutor(max_workers=eval_threads()) as pool:
            divergences = list(pool.map(
                lambda s: batch_divergences(z_c[s:s + size], z_r[s:s + size], self.fusion.tau),
                starts))

        fused = []
        for start, batch_divergence in zip(starts, divergences):
            fused.extend(fuse_batch(z_c[start:start + size], z_r[start:start + size],
                                    self.fusion, divergences=batch_divergence))

        pred_fused = np.array([p.y_star for p in fused], dtype=np.int64)
        chosen = {"fused": pred_fused, "conservative": pred_c, "radical": pred_r}[self.fusion.mode]
        record['accuracy'] = accuracy(chosen, test.y)
        record['gate_rate'] = float(np.mean([p.gate for p in fused]))
        record.update(self._running_record())
        predictions = [prediction_record(i, p) for i, p in zip(test.ids, fused)]
        return record, predictions

    def predict(self, x: np.ndarray) -> np.ndarray:
        """
        Labels under the configured fusion mode

        Several rows share one batch threshold; a single row is fused against
        the running statistics, which carry over from the last evaluate call.
        """
        z_c, z_r = self.logits(x)
        if z_r is None or self.fusion.mode == "conservative":
            return np.argmax(z_c, axis=1)
        if self.fusion.mode == "radical":
            return np.argmax(z_r, axis=1)
        return np.array([p.y_star for p in fuse_batch(z_c, z_r, self.fusion)], dtype=np.int64)

    def _running_record(self) -> Dict:
        return {
            'divergence_mean': self.fusion.running_mean,
            'divergence_std': self.fusion.running_std,
            'divergence_count': self.fusion.running_count,
        }

    # ------------------------------------------------------------------
    # Checkpoint state
    # ------------------------------------------------------------------

    def state_dict(self) -> Tuple[Dict, Dict[str, np.ndarray]]:
        """
        Everything needed to continue after the current session

        Returns:
            (JSON-serializable header, named arrays)
        """
        if self.conservative is None:
            raise StateError("nothing to checkpoint before the first session")
        header = {
            'session': self.session,
            'beta': self.beta,
            'rng_state': self.rng.bit_generator.state,
            'has_radical': self.radical is not None,
            'num_blocks': len(self.conservative.adapters),
            'stats_c_count': self.stats_c.count,
            'stats_r_count': self.stats_r.count if self.stats_r is not None else 0,
            'fusion_running': [self.fusion.running_mean, self.fusion.running_m2,
                               self.fusion.running_count],
        }
        arrays = {}
        learners = [("conservative", self.conservative, self.stats_c, self.analytic_c)]
        if self.radical is not None:
            learners.append(("radical", self.radical, self.stats_r, self.analytic_r))
        for name, state, stats, analytic in learners:
            for key, array in state.adapters.parameters():
                arrays[f"{name}.{key}"] = array
            arrays[f"{name}.classifier"] = state.classifier
            arrays[f"{name}.gram"] = stats.gram
            arrays[f"{name}.cross"] = stats.cross
            arrays[f"{name}.analytic"] = analytic.weights
        return header, arrays

    def load_state_dict(self, header: Dict, arrays: Dict[str, np.ndarray]):
        """Restore a state produced by state_dict on an engine with the same config"""
        self.session = int(header['session'])
        self.beta = float(header['beta'])
        self.rng.bit_generator.state = header['rng_state']
        mean, m2, count = header['fusion_running']
        self.fusion.running_mean, self.fusion.running_m2 = float(mean), float(m2)
        self.fusion.running_count = int(count)

        def restore(name: str, role: Role, count: int):
            adapters = AdapterSet([
                Adapter(arrays[f"{name}.block{i}.w_down"].copy(),
                        arrays[f"{name}.block{i}.w_up"].copy())
                for i in range(int(header['num_blocks']))
            ])
            state = LearnerState(adapters=adapters,
                                 classifier=arrays[f"{name}.classifier"].copy(), role=role)
            stats = SuffStats(arrays[f"{name}.gram"].copy(), arrays[f"{name}.cross"].copy(),
                              int(count))
            return state, stats, AnalyticClassifier(arrays[f"{name}.analytic"].copy(), self.beta)

        self.conservative, self.stats_c, self.analytic_c = restore(
            "conservative", Role.CONSERVATIVE, header['stats_c_count'])
        if header['has_radical']:
            self.radical, self.stats_r, self.analytic_r = restore(
                "radical", Role.RADICAL, header['stats_r_count'])
