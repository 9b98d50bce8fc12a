"""Super-resolution toolkit for grayscale plant-root imagery."""
