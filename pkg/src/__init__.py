"""
oclbench - online continual learning with a single prefix prompt

A frozen toy ViT encoder, a learnable key/value prefix, a cosine classifier
with minibatch logit masking, and the Si-Blurry stream with its metrics.
"""

__version__ = "1.0.0"
__description__ = "Online continual learning benchmark with prefix prompts"
