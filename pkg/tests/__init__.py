"""Tests for fbflow"""
