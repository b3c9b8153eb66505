"""In-silico image-activated droplet sorter: synthesis, CNN, sorting loop."""

__version__ = "0.1.0"
