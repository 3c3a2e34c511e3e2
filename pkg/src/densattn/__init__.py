"""Parameter-free attention for crowd density estimation."""
