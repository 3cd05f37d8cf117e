from .attention import CrossAttentionBlock, FeedForward, MultiHeadAttention, SelfAttentionBlock
from .backbone import STRIDES, FeatureHierarchy, ToyResNet, backbone_forward
from .fpn import FPN, VARIANTS, AdapterConfig, PyramidFeatures, fpn_forward
from .pooling import AttentionPool, PooledImageFeature, attention_pool
from .heads import (
    DetHead,
    DetPrediction,
    SegHead,
    SegPrediction,
    apply_box_deltas,
    box_cxcywh_to_xyxy,
    box_xyxy_to_cxcywh,
    mask_logits_from_embeddings,
    region_average_pool,
)
