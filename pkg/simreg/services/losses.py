"""
Training objectives

    L_F      mean endpoint error between predicted and ground-truth fields
    L_sim    negative windowed NLCC between fixed and reconstructed images
    D        soft Dice over one-hot and warped continuous label maps
    hybrid   L_F + lambda * L_sim
    MTL      L_F + lambda * (L_sim0 + L_sim1) + beta * (D0 + D1)

Operands may be Tensors (graph nodes) or the plain data model types;
plain values enter the graph as constants.
"""
from typing import Dict

from simreg.models.volumes import DisplacementField, ProbabilityMap, Volume
from simreg.services.autodiff import Tensor, as_tensor, field_epe, local_ncc_loss, soft_dice_loss

DICE_SMOOTH = 1e-5


def _graph(x) -> Tensor:
    if isinstance(x, Volume):
        return Tensor(x.data)
    if isinstance(x, DisplacementField):
        return Tensor(x.vectors)
    if isinstance(x, ProbabilityMap):
        return Tensor(x.values)
    return as_tensor(x)


def loss_field(f, f_g) -> Tensor:
    return field_epe(_graph(f), _graph(f_g))


def loss_similarity(i_fixed, i_recon, window: int = 5) -> Tensor:
    return local_ncc_loss(_graph(i_fixed), _graph(i_recon), window)


def loss_segmentation(s_pred, s_true_onehot) -> Tensor:
    pred, truth = _graph(s_pred), _graph(s_true_onehot)
    if pred.shape != truth.shape:
        raise ValueError(f"dims mismatch: {pred.shape} vs {truth.shape}")
    return soft_dice_loss(pred, truth, DICE_SMOOTH)


def hybrid_terms(f, f_g, i0, i_r0, window: int = 5) -> Dict[str, Tensor]:
    return {
        "L_F": loss_field(f, f_g),
        "L_sim0": loss_similarity(i0, i_r0, window),
    }


def loss_hybrid(f, f_g, i0, i_r0, lam: float = 10.0, window: int = 5) -> Tensor:
    terms = hybrid_terms(f, f_g, i0, i_r0, window)
    return terms["L_F"] + lam * terms["L_sim0"]


def mtl_terms(f0, f_g0, i0, i_r0, i1, i_r1, s0, s_g0, s1, s_g1, window: int = 5) -> Dict[str, Tensor]:
    terms = hybrid_terms(f0, f_g0, i0, i_r0, window)
    terms["L_sim1"] = loss_similarity(i1, i_r1, window)
    terms["D0"] = loss_segmentation(s0, s_g0)
    terms["D1"] = loss_segmentation(s1, s_g1)
    return terms


def loss_mtl(f0, f_g0, i0, i_r0, i1, i_r1, s0, s_g0, s1, s_g1,
             lam: float = 10.0, beta: float = 10.0, window: int = 5) -> Tensor:
    """Dual-registration multi-task objective"""
    t = mtl_terms(f0, f_g0, i0, i_r0, i1, i_r1, s0, s_g0, s1, s_g1, window)
    return t["L_F"] + lam * (t["L_sim0"] + t["L_sim1"]) + beta * (t["D0"] + t["D1"])
