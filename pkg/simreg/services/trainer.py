"""
Training loop for the registration network

Modes:
- REG:  simulated pair per step, hybrid loss L_F + lambda * L_sim0
- MTL:  adds dual registration to a real dataset image I1 and the soft Dice
        of the warped one-hot atlas labels in both branches
- FEAT: MTL with the residual segmentation head refining the simulated
        branch's warped labels

Batch size is 1. Fixed images and ground-truth fields are simulated on the
fly from the current moving image. Two seeded streams drive a run: the
simulator stream (SimulatorConfig.seed) and the pairing stream
(TrainConfig.seed), so a run is reproducible bit for bit.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from simreg.models.configs import SimulatorConfig, TrainConfig, TrainingMode
from simreg.models.datasets import TrainSample
from simreg.models.reports import LOSS_CSV_HEADER, LossRecord
from simreg.models.volumes import LabelMap, Volume
from simreg.services import losses
from simreg.services.autodiff import Tensor, warp
from simreg.services.network import NetworkParameters, forward_tensors, init_network, seg_head_tensor
from simreg.services.nifti_io import write_csv
from simreg.services.optimizer import Adam, AdamState
from simreg.services.preprocessing import one_hot
from simreg.services.simulator import generate_pair, make_rng

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    params: NetworkParameters
    history: List[LossRecord] = field(default_factory=list)
    optimizer_state: AdamState = field(default_factory=AdamState)

    @property
    def steps(self) -> int:
        return len(self.history)


def _check_dataset(dataset: Sequence[TrainSample], mode: TrainingMode) -> None:
    if not dataset:
        raise ValueError("empty dataset")
    if mode == TrainingMode.REG:
        return
    for k, sample in enumerate(dataset):
        if not sample.has_labels:
            raise ValueError(f"missing labels: sample {k} has no moving labels ({mode.value} mode)")
        if sample.fixed_real is not None and sample.fixed_real_labels is None:
            raise ValueError(f"missing labels: sample {k} has a fixed image without labels")
    classes = {s.moving_labels.num_classes for s in dataset}
    classes |= {s.fixed_real_labels.num_classes for s in dataset if s.fixed_real_labels is not None}
    if len(classes) != 1:
        raise ValueError(f"samples disagree on the number of classes: {sorted(classes)}")


def _dual_target(dataset: Sequence[TrainSample], index: int,
                 rng: np.random.Generator) -> Tuple[Volume, LabelMap]:
    """Real fixed image I1 and its labels for dual registration"""
    sample = dataset[index]
    if sample.fixed_real is not None:
        return sample.fixed_real, sample.fixed_real_labels
    if len(dataset) == 1:
        return sample.moving, sample.moving_labels
    j = int(rng.integers(0, len(dataset) - 1))
    if j >= index:
        j += 1
    return dataset[j].moving, dataset[j].moving_labels


def _step_losses(params: NetworkParameters, sample: TrainSample, dataset: Sequence[TrainSample],
                 index: int, sim_cfg: SimulatorConfig, cfg: TrainConfig,
                 sim_rng: np.random.Generator, pair_rng: np.random.Generator):
    """Build the graph of one step; returns (total loss, components)"""
    moving = sample.moving
    pair = generate_pair(moving, sample.moving_labels, sim_cfg, sim_rng)
    field0, feat0 = forward_tensors(params, moving.data, pair.fixed.data, pad=True)
    recon0 = warp(Tensor(moving.data), field0)
    window = cfg.nlcc_window

    if cfg.mode == TrainingMode.REG:
        terms = losses.hybrid_terms(field0, pair.field, pair.fixed, recon0, window)
        total = terms["L_F"] + cfg.lambda_ * terms["L_sim0"]
        return total, terms["L_F"].item(), terms["L_sim0"].item(), 0.0, 0.0

    fixed1, labels1 = _dual_target(dataset, index, pair_rng)
    field1, _ = forward_tensors(params, moving.data, fixed1.data, pad=True)
    recon1 = warp(Tensor(moving.data), field1)
    atlas = Tensor(one_hot(sample.moving_labels).values)
    s0 = warp(atlas, field0)
    s1 = warp(atlas, field1)
    s_g0 = one_hot(pair.fixed_labels)
    s_g1 = one_hot(labels1)

    terms = losses.mtl_terms(field0, pair.field, pair.fixed, recon0, fixed1, recon1,
                             s0, s_g0, s1, s_g1, window)
    if cfg.mode == TrainingMode.MTL:
        seg = terms["D0"] + terms["D1"]
    else:
        s_feat0 = seg_head_tensor(params, feat0, s0)
        seg = losses.loss_segmentation(s_feat0, s_g0) + terms["D1"]
        if cfg.feat_keep_warped_term:
            seg = seg + terms["D0"]

    total = terms["L_F"] + cfg.lambda_ * (terms["L_sim0"] + terms["L_sim1"]) + cfg.beta * seg
    return total, terms["L_F"].item(), terms["L_sim0"].item(), terms["L_sim1"].item(), seg.item()


def train(dataset: Sequence[TrainSample], sim_cfg: SimulatorConfig, train_cfg: TrainConfig,
          params: Optional[NetworkParameters] = None) -> TrainResult:
    """
    Optimize the network on simulated (and, in MTL/FEAT, real) pairs.

    Args:
        dataset: training samples (labels required in MTL/FEAT)
        sim_cfg: simulator distribution
        train_cfg: weights, optimizer and schedule; steps overrides epochs
        params: starting parameters (copied); fresh ones from train_cfg.seed if None

    Returns:
        TrainResult with the final parameters and one LossRecord per step

    Raises:
        ValueError: empty dataset, missing labels, absent segmentation head,
            or a non-finite loss
    """
    mode = train_cfg.mode
    _check_dataset(dataset, mode)
    num_classes = dataset[0].moving_labels.num_classes if dataset[0].has_labels else None

    if params is None:
        params = init_network(train_cfg.seed, num_classes if mode == TrainingMode.FEAT else None)
    else:
        params = params.copy()
    if mode == TrainingMode.FEAT and not params.has_seg_head:
        raise ValueError("segmentation head parameters absent")

    total_steps = train_cfg.steps if train_cfg.steps is not None else train_cfg.epochs * len(dataset)
    optimizer = Adam(params, train_cfg)
    sim_rng = make_rng(sim_cfg.seed)
    pair_rng = np.random.default_rng(train_cfg.seed)
    history: List[LossRecord] = []

    logger.info(f"Training {mode.value}: {len(dataset)} samples, {total_steps} steps, "
                f"lambda={train_cfg.lambda_}, beta={train_cfg.beta}, lr={train_cfg.learning_rate}")
    started = time.perf_counter()

    for step in range(total_steps):
        index = step % len(dataset)
        optimizer.zero_grad()
        total, l_f, l_sim0, l_sim1, l_seg = _step_losses(
            params, dataset[index], dataset, index, sim_cfg, train_cfg, sim_rng, pair_rng)
        record = LossRecord(step, l_f, l_sim0, l_sim1, l_seg, total.item())
        if not record.is_finite():
            logger.error(f"❌ Non-finite loss at step {step}: {record}")
            raise ValueError(f"non-finite loss at step {step}")
        total.backward()
        optimizer.step()
        history.append(record)

        if train_cfg.log_every and (step % train_cfg.log_every == 0 or step == total_steps - 1):
            logger.info(f"step {step:5d}  L_F={l_f:.4f}  L_sim0={l_sim0:.4f}  L_sim1={l_sim1:.4f}  "
                        f"L_seg={l_seg:.4f}  total={record.total:.4f}")

    params.zero_grad()
    logger.info(f"✅ Training finished: {total_steps} steps in {time.perf_counter() - started:.1f}s")
    return TrainResult(params=params, history=history, optimizer_state=optimizer.state)


def write_loss_history(path, history: Sequence[LossRecord]) -> Path:
    return write_csv(path, LOSS_CSV_HEADER, [r.to_csv_row() for r in history])
