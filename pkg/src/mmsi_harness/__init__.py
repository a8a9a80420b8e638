"""Online multimodal social-interaction evaluation harness.

Builds causal online samples from transcripts and pose tracks, renders
player-colored visual prompts, forecasts upcoming turns coarse-to-fine and
scores referent predictions from any chat-completions backend.
"""

__version__ = "0.1.0"
