"""Long-running acceptance sweeps for blmac-sim."""
