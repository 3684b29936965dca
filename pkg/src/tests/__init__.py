"""
Test suite for oclbench.

Unit tests per module plus end-to-end CLI and ablation runs on small synthetic streams.
"""
