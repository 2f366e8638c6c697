# Test package for protofed
