/** Small shared helpers: checksums, colormaps, float comparisons. */

/** FNV-1a 32-bit checksum over raw bytes; used to fingerprint vertex
 * buffers in the debug panel and the round-trip tests. */
export function fnv1a32(bytes: Uint8Array): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < bytes.length; i++) {
    h ^= bytes[i];
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h >>> 0;
}

export function bufferChecksum(view: ArrayBufferView): string {
  const bytes = new Uint8Array(view.buffer, view.byteOffset, view.byteLength);
  return fnv1a32(bytes).toString(16).padStart(8, "0");
}

export function clamp(x: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, x));
}

/** True when a and b agree to float32 precision (a few ulps of slack). */
export function nearFloat32(a: number, b: number, ulps = 4): boolean {
  const fa = Math.fround(a);
  const fb = Math.fround(b);
  const scale = Math.max(Math.abs(fa), Math.abs(fb), 1e-30);
  // One float32 ulp near `scale` is about scale * 2^-23.
  return Math.abs(fa - fb) <= ulps * scale * Math.pow(2, -23);
}

/** Map t in [0,1] to a warm heat color (dark blue → red → yellow). */
export function heatColor(t: number): [number, number, number] {
  const x = clamp(t, 0, 1);
  return [
    clamp(1.5 * x, 0, 1),
    clamp(1.5 * x - 0.5, 0, 1),
    clamp(4 * x - 3, 0, 0.9) + 0.1 * (1 - x),
  ];
}

/** Map t in [0,1] to a cool-to-warm diverging color for weight fields. */
export function weightColor(t: number): [number, number, number] {
  const x = clamp(t, 0, 1);
  return [x, 0.25 + 0.4 * (1 - Math.abs(2 * x - 1)), 1 - x];
}
