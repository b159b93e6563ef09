from .gradcheck import GradCheckReport, NonFiniteLoss, grad_check
from .ops import Block, MultiHeadAttention, ShapeMismatch, Stack, op_set
from .optim import OptimState, adamw_step

__all__ = [
    "Block", "GradCheckReport", "MultiHeadAttention", "NonFiniteLoss", "OptimState",
    "ShapeMismatch", "Stack", "adamw_step", "grad_check", "op_set",
]
