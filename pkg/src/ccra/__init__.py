"""Text-conditioned cross-layer regional attention for vision-language fusion."""

from .conditioning import ConditioningParams, TextEmbeddings, project_queries, token_importance
from .lpwca import LpwcaParams, StackedFeatures, VisualStack, aggregate_map, lpwca_forward, lpwca_scores, stack_layers, unstack_layers
from .lwca import LayerWeights, LwcaParams, layer_descriptors, layer_weights, lwca_forward, semantic_aggregate, smooth_layer_weights
from .numerics import Tensor, backward, finite_difference, no_grad
from .pipeline import (
    GROUPS,
    VARIANTS,
    CcraConfig,
    CcraParams,
    ForwardTrace,
    batch_loss,
    ccra_forward,
    count_parameters,
    depth_query_task,
    enumerate_parameters,
    evaluate,
    fuse,
    gradient_check,
    init_params,
    jitter_params,
    project_visual,
    synth_inputs,
    toy_train_step,
    train,
    variant_forward,
)
from .pwca import PwcaParams, patch_weights, pwca_forward, regional_modulate

__version__ = "0.1.0"
