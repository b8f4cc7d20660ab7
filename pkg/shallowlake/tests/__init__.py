# Shallow Lake Test Suite
