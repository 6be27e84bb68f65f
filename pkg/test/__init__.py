"""Test package for the MCP-AutoGen DocQA application."""
