// benches only
