"""Datagram transport, wire framing and the per-node event loop."""
