"""Knowledge-graph conversational recommendation with curriculum-trained
query fusion and prefix prompts over frozen stand-in language models."""

__version__ = "0.1.0"
