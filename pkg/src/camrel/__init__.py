"""Patch reliability estimation for camera model attribution."""
