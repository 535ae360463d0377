/** Editor state and service orchestration, free of DOM and WebGL so the
 * whole control flow is unit-testable.
 *
 * Invariants enforced here:
 *  - the displayed surface always came from a service buffer (no local
 *    model math);
 *  - stale responses (revision below the displayed one) are discarded;
 *  - at most one edit request is in flight, and rapid-fire requests
 *    collapse to the latest one;
 *  - a failed edit rolls the UI state back to the last acknowledged one.
 */

import type {
  AnatomyBuffers,
  ModelMeta,
  PoseRequest,
  ServiceClient,
  VertexBuffer,
} from "./api.js";
import { MaskSet } from "./mask.js";

/** Per-vertex Euclidean displacement between two xyz-interleaved buffers. */
export function displacementMagnitudes(
  a: Float32Array,
  b: Float32Array,
): Float32Array {
  if (a.length !== b.length) {
    throw new RangeError(`buffer length mismatch: ${a.length} vs ${b.length}`);
  }
  const n = a.length / 3;
  const out = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    const dx = a[3 * i] - b[3 * i];
    const dy = a[3 * i + 1] - b[3 * i + 1];
    const dz = a[3 * i + 2] - b[3 * i + 2];
    out[i] = Math.fround(Math.sqrt(dx * dx + dy * dy + dz * dz));
  }
  return out;
}

/** Collapses overlapping submissions to "latest wins": while a request is
 * in flight, newer payloads replace the queued one instead of piling up. */
export class LatestWinsQueue<T> {
  private inFlight = false;
  private pending: T | null = null;

  constructor(private readonly run: (payload: T) => Promise<void>) {}

  get busy(): boolean {
    return this.inFlight;
  }

  async submit(payload: T): Promise<void> {
    if (this.inFlight) {
      this.pending = payload;
      return;
    }
    this.inFlight = true;
    try {
      let next: T | null = payload;
      while (next !== null) {
        const current: T = next;
        this.pending = null;
        await this.run(current);
        next = this.pending;
      }
    } finally {
      this.pending = null;
      this.inFlight = false;
    }
  }
}

export interface CameraOrbit {
  theta: number; // azimuth, radians
  phi: number; // elevation, radians
  distance: number;
  target: [number, number, number];
}

export type PosePreset = { label: string; pose: PoseRequest };

export interface EditorEvents {
  onSurface?(vertices: Float32Array, revision: number): void;
  onHeat?(magnitudes: Float32Array | null): void;
  onError?(message: string): void;
  onState?(): void;
}

export class EditorState {
  meta: ModelMeta | null = null;
  anatomy: AnatomyBuffers | null = null;
  mask: MaskSet = new MaskSet(0);
  mirrorBrush = false;
  brushRadius = 24;
  brushMode: "paint" | "erase" = "paint";
  thicknessScale = 1.0;
  camera: CameraOrbit = { theta: 0, phi: 0, distance: 3, target: [0, 0, 0] };
  pose: PoseRequest = {};

  /** Surface of the last acknowledged revision (what is on screen). */
  displayed: Float32Array | null = null;
  displayedRevision = -1;
  /** Pure-pose surface for the current pose: the baseline the thickness
   * heatmap measures displacement against. */
  posedBaseline: Float32Array | null = null;

  /** Accept a vertex buffer if it is newer than what is displayed. */
  acceptBuffer(buf: VertexBuffer): boolean {
    if (buf.revision <= this.displayedRevision) return false;
    this.displayed = buf.vertices;
    this.displayedRevision = buf.revision;
    return true;
  }
}

export class EditorController {
  readonly state = new EditorState();
  private readonly editQueue: LatestWinsQueue<number>;
  private readonly poseQueue: LatestWinsQueue<PoseRequest>;

  constructor(
    private readonly client: ServiceClient,
    private readonly events: EditorEvents = {},
  ) {
    this.editQueue = new LatestWinsQueue((scale) => this.runEdit(scale));
    this.poseQueue = new LatestWinsQueue((pose) => this.runPose(pose));
  }

  /** Fetch metadata, anatomy, and the neutral surface. */
  async connect(): Promise<ModelMeta> {
    const meta = await this.client.meta();
    this.state.meta = meta;
    this.state.mask = new MaskSet(meta.vertex_count);
    this.state.anatomy = await this.client.anatomy();
    await this.runPose({});
    return meta;
  }

  posePresets(): PosePreset[] {
    const meta = this.state.meta;
    if (!meta) return [];
    const presets: PosePreset[] = [{ label: "neutral", pose: {} }];
    const open = Math.PI / 14;
    presets.push({
      label: "jaw open",
      pose: {
        jaw: [1, 0, 0, 0, Math.cos(open), Math.sin(open), 0, 0, 0],
      },
    });
    for (let i = 0; i < meta.n_shapes - 1; i++) {
      const coeffs = new Array<number>(meta.n_shapes - 1).fill(0);
      coeffs[i] = 1;
      presets.push({ label: `expression ${i + 1}`, pose: { coeffs } });
    }
    return presets;
  }

  /** Change pose; clears the heatmap since the baseline moved. */
  setPose(pose: PoseRequest): Promise<void> {
    return this.poseQueue.submit(pose);
  }

  private async runPose(pose: PoseRequest): Promise<void> {
    const prev = this.state.pose;
    this.state.pose = pose;
    try {
      const buf = await this.client.evaluate(pose);
      this.state.posedBaseline = buf.vertices;
      if (this.state.acceptBuffer(buf)) {
        this.events.onSurface?.(buf.vertices, buf.revision);
      }
      // Re-apply the standing edit on top of the new pose, if any.
      if (this.state.mask.size > 0 && this.state.thicknessScale !== 1.0) {
        await this.runEdit(this.state.thicknessScale);
      } else {
        this.events.onHeat?.(null);
      }
      this.events.onState?.();
    } catch (err) {
      this.state.pose = prev;
      this.events.onError?.(String(err));
      this.events.onState?.();
    }
  }

  /** Commit a thickness scale for the painted mask (absolute, idempotent).
   * Rapid calls collapse to the latest value. */
  applyThickness(scale: number): Promise<void> {
    return this.editQueue.submit(scale);
  }

  private async runEdit(scale: number): Promise<void> {
    const prevScale = this.state.thicknessScale;
    this.state.thicknessScale = scale;
    try {
      const buf = await this.client.editThickness(
        this.state.mask.indices(),
        scale,
      );
      if (this.state.acceptBuffer(buf)) {
        this.events.onSurface?.(buf.vertices, buf.revision);
        if (this.state.posedBaseline) {
          this.events.onHeat?.(
            displacementMagnitudes(buf.vertices, this.state.posedBaseline),
          );
        }
      }
      this.events.onState?.();
    } catch (err) {
      this.state.thicknessScale = prevScale;
      this.events.onError?.(String(err));
      this.events.onState?.();
    }
  }
}
