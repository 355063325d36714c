# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

"""Agent Consent and Adherence Protocol (ACAP) for Python"""

PACKAGE_NAME = "acap"

# Protocol versions this package can speak, highest last
SUPPORTED_PROTOCOL_VERSIONS = ("0.1",)
