from .adapter import L2VAdapter, NaivePromptFusion, activation_maps, l2v_adapt, naive_prompt_fusion
from .encoder import TextEncoder, text_encode
from .prompts import (
    DEFAULT_CONTEXT_LENGTH,
    DEFAULT_TEMPLATE,
    DEFAULT_TEMPLATES,
    PromptContext,
    ensemble_prompt_features,
    handcrafted_prompt_features,
    prompt_sequences,
    task_prompt_features,
)
from .tokenizer import MAX_CONTEXT, VOCAB_SIZE, bigram_ids, tokenize
