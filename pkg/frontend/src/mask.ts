/** Vertex-mask painting: screen-space brush coverage, paint/erase
 * strokes, and optional mirroring across the model's symmetry plane. */

import type { SymmetryPlane } from "./api.js";

export type BrushMode = "paint" | "erase";

export interface ProjectedVertex {
  x: number; // pixels
  y: number; // pixels
  /** Front-facing under the current camera; hidden vertices never paint. */
  visible: boolean;
}

export interface ScreenPoint {
  x: number;
  y: number;
}

/** Vertices whose projections fall within `radius` of any stroke sample.
 * Empty strokes cover nothing. */
export function strokeCoverage(
  projected: ProjectedVertex[],
  stroke: ScreenPoint[],
  radius: number,
): number[] {
  if (stroke.length === 0 || radius <= 0) return [];
  const r2 = radius * radius;
  const hit: number[] = [];
  for (let i = 0; i < projected.length; i++) {
    const p = projected[i];
    if (!p.visible) continue;
    for (const s of stroke) {
      const dx = p.x - s.x;
      const dy = p.y - s.y;
      if (dx * dx + dy * dy <= r2) {
        hit.push(i);
        break;
      }
    }
  }
  return hit;
}

/** Pair every vertex with its reflection across the symmetry plane
 * (nearest-vertex matching). pairs[i] = j means j mirrors i; a vertex on
 * the plane pairs with itself. */
export function mirrorPairs(
  positions: Float32Array,
  plane: SymmetryPlane,
): Int32Array {
  const n = positions.length / 3;
  const [nx, ny, nz] = plane.normal;
  const norm = Math.hypot(nx, ny, nz) || 1;
  const ux = nx / norm;
  const uy = ny / norm;
  const uz = nz / norm;
  const pairs = new Int32Array(n);
  for (let i = 0; i < n; i++) {
    const x = positions[3 * i];
    const y = positions[3 * i + 1];
    const z = positions[3 * i + 2];
    const d = x * ux + y * uy + z * uz - plane.offset;
    const rx = x - 2 * d * ux;
    const ry = y - 2 * d * uy;
    const rz = z - 2 * d * uz;
    let best = -1;
    let bestD = Infinity;
    for (let j = 0; j < n; j++) {
      const dx = positions[3 * j] - rx;
      const dy = positions[3 * j + 1] - ry;
      const dz = positions[3 * j + 2] - rz;
      const dist = dx * dx + dy * dy + dz * dz;
      if (dist < bestD) {
        bestD = dist;
        best = j;
      }
    }
    pairs[i] = best;
  }
  return pairs;
}

/** Painted vertex set with stroke semantics: painting adds coverage,
 * erasing removes it, and erasing the stroke just painted restores the
 * prior set. Mirroring extends each stroke with the paired vertices. */
export class MaskSet {
  private readonly set = new Set<number>();

  constructor(readonly vertexCount: number) {}

  get size(): number {
    return this.set.size;
  }

  has(index: number): boolean {
    return this.set.has(index);
  }

  indices(): number[] {
    return [...this.set].sort((a, b) => a - b);
  }

  clear(): void {
    this.set.clear();
  }

  /** Returns the indices whose membership actually changed, so applying
   * the opposite mode to the returned list undoes the stroke exactly. */
  applyStroke(
    covered: Iterable<number>,
    mode: BrushMode,
    mirror?: Int32Array | null,
  ): number[] {
    const expanded = new Set<number>();
    for (const i of covered) {
      if (i < 0 || i >= this.vertexCount) {
        throw new RangeError(
          `vertex ${i} outside [0, ${this.vertexCount})`,
        );
      }
      expanded.add(i);
      if (mirror) expanded.add(mirror[i]);
    }
    const changed: number[] = [];
    for (const i of expanded) {
      if (mode === "paint") {
        if (!this.set.has(i)) {
          this.set.add(i);
          changed.push(i);
        }
      } else if (this.set.delete(i)) {
        changed.push(i);
      }
    }
    return changed;
  }

  /** True when the mask maps onto itself under the pairing. */
  isMirrorSymmetric(mirror: Int32Array): boolean {
    for (const i of this.set) if (!this.set.has(mirror[i])) return false;
    return true;
  }
}
