/** Browser entry point: wires the service client, editor controller,
 * renderer, and DOM controls together. No model math happens here — every
 * displayed surface is a service buffer. */

import { ServiceClient } from "./api.js";
import { MaskSet, strokeCoverage, mirrorPairs } from "./mask.js";
import type { ScreenPoint } from "./mask.js";
import { EditorController } from "./state.js";
import { MeshRenderer } from "./render.js";
import type { OverlayMode } from "./render.js";
import { bufferChecksum, clamp } from "./util.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("viewport");
const statusBox = el<HTMLDivElement>("status");
const debugBox = el<HTMLDivElement>("debug");

let renderer: MeshRenderer;
try {
  renderer = new MeshRenderer(canvas);
} catch (err) {
  statusBox.textContent = String(err);
  throw err;
}

let controller: EditorController | null = null;
let client: ServiceClient | null = null;
let overlay: OverlayMode = "none";
let heat: Float32Array | null = null;
let pairs: Int32Array | null = null;

function toast(message: string, isError = true): void {
  statusBox.textContent = message;
  statusBox.className = isError ? "status error" : "status";
  if (!isError) setTimeout(() => (statusBox.textContent = ""), 2500);
}

function overlayField(): Float32Array | null {
  const c = controller;
  if (!c || !c.state.anatomy) return null;
  if (overlay === "skinning") return c.state.anatomy.skinning;
  if (overlay === "thickness") {
    if (heat) {
      // Normalize live displacement against the anatomy thickness range
      // so the legend is comparable across strokes.
      const d = c.state.anatomy.thickness;
      let max = 0;
      for (let i = 0; i < d.length; i++) max = Math.max(max, d[i]);
      const out = new Float32Array(heat.length);
      for (let i = 0; i < heat.length; i++) out[i] = heat[i] / (max || 1);
      return out;
    }
    // No live edit: show the learned thickness field itself.
    const d = c.state.anatomy.thickness;
    let max = 0;
    for (let i = 0; i < d.length; i++) max = Math.max(max, d[i]);
    const out = new Float32Array(d.length);
    for (let i = 0; i < d.length; i++) out[i] = d[i] / (max || 1);
    return out;
  }
  return null;
}

function repaint(): void {
  const c = controller;
  if (!c || !c.state.meta) return;
  renderer.setColors(
    c.state.meta.vertex_count,
    c.state.mask,
    overlay,
    overlayField(),
  );
  renderer.draw(c.state.camera);
}

function refreshDebug(): void {
  const c = controller;
  if (!c || !c.state.displayed) return;
  const lines = [
    `revision ${c.state.displayedRevision}`,
    `buffer fnv1a ${bufferChecksum(c.state.displayed)}`,
    `mask ${c.state.mask.size} vertices, scale ${c.state.thicknessScale.toFixed(2)}`,
  ];
  if (heat && c.state.anatomy && c.state.mask.size) {
    // Spot-check: masked displacement should equal |scale-1| x thickness.
    const want = Math.abs(c.state.thicknessScale - 1);
    let worst = 0;
    for (const i of c.state.mask.indices()) {
      const expected = want * c.state.anatomy.thickness[i];
      worst = Math.max(worst, Math.abs(heat[i] - expected));
    }
    lines.push(`max |displacement - |s-1|*thickness| = ${worst.toExponential(2)}`);
  }
  debugBox.textContent = lines.join("\n");
}

async function connect(): Promise<void> {
  const url = el<HTMLInputElement>("service-url").value.replace(/\/$/, "");
  const session = el<HTMLInputElement>("session-id").value || "default";
  client = new ServiceClient(url, session);
  controller = new EditorController(client, {
    onSurface: (verts) => {
      renderer.setSurface(verts);
      repaint();
      refreshDebug();
    },
    onHeat: (h) => {
      heat = h;
      repaint();
      refreshDebug();
    },
    onError: (message) => {
      toast(message);
      syncControls();
    },
    onState: () => {
      syncControls();
      refreshDebug();
    },
  });
  try {
    const meta = await controller.connect();
    renderer.setTopology(await client.faces());
    const a = controller.state.anatomy;
    if (a) renderer.setAnatomyPoints(a.bone);
    if (controller.state.displayed) {
      renderer.setSurface(controller.state.displayed);
    }
    const mid = meta.bbox.min.map((lo, i) => (lo + meta.bbox.max[i]) / 2);
    const size = Math.hypot(
      meta.bbox.max[0] - meta.bbox.min[0],
      meta.bbox.max[1] - meta.bbox.min[1],
      meta.bbox.max[2] - meta.bbox.min[2],
    );
    controller.state.camera = {
      theta: 0,
      phi: 0.15,
      distance: size * 1.8,
      target: [mid[0], mid[1], mid[2]],
    };
    pairs =
      meta.symmetry_plane && controller.state.displayed
        ? mirrorPairs(controller.state.displayed, meta.symmetry_plane)
        : null;
    fillPresets();
    toast(`connected: ${meta.vertex_count} vertices, ${meta.n_shapes} shapes`, false);
    repaint();
  } catch (err) {
    toast(String(err));
  }
}

function fillPresets(): void {
  const select = el<HTMLSelectElement>("pose-preset");
  select.innerHTML = "";
  controller?.posePresets().forEach((preset, i) => {
    const opt = document.createElement("option");
    opt.value = String(i);
    opt.textContent = preset.label;
    select.appendChild(opt);
  });
}

function syncControls(): void {
  const c = controller;
  if (!c) return;
  el<HTMLInputElement>("thickness-scale").value = String(c.state.thicknessScale);
  el<HTMLSpanElement>("scale-value").textContent =
    c.state.thicknessScale.toFixed(2);
}

// ------------------------------------------------------------- interactions

let dragging: "orbit" | "brush" | null = null;
let lastX = 0;
let lastY = 0;
let stroke: ScreenPoint[] = [];

canvas.addEventListener("mousedown", (ev) => {
  lastX = ev.offsetX;
  lastY = ev.offsetY;
  const painting = el<HTMLInputElement>("brush-on").checked && !ev.shiftKey;
  dragging = painting ? "brush" : "orbit";
  if (dragging === "brush") {
    stroke = [{ x: ev.offsetX, y: ev.offsetY }];
    applyStroke();
  }
});

canvas.addEventListener("mousemove", (ev) => {
  if (!dragging || !controller) return;
  if (dragging === "orbit") {
    const cam = controller.state.camera;
    cam.theta -= (ev.offsetX - lastX) * 0.008;
    cam.phi = clamp(cam.phi + (ev.offsetY - lastY) * 0.008, -1.45, 1.45);
    lastX = ev.offsetX;
    lastY = ev.offsetY;
    repaint();
  } else {
    stroke.push({ x: ev.offsetX, y: ev.offsetY });
    applyStroke();
  }
});

window.addEventListener("mouseup", () => {
  dragging = null;
  stroke = [];
});

canvas.addEventListener("wheel", (ev) => {
  if (!controller) return;
  ev.preventDefault();
  const cam = controller.state.camera;
  cam.distance *= Math.exp(ev.deltaY * 0.001);
  repaint();
});

function applyStroke(): void {
  const c = controller;
  if (!c || stroke.length === 0) return;
  const projected = renderer.project(c.state.camera);
  const covered = strokeCoverage(projected, stroke, c.state.brushRadius);
  const mirror = el<HTMLInputElement>("mirror-brush").checked ? pairs : null;
  const mode = el<HTMLInputElement>("erase-mode").checked ? "erase" : "paint";
  c.state.mask.applyStroke(covered, mode, mirror);
  repaint();
  refreshDebug();
}

// Thickness slider: commit on release; optional 150 ms debounced live mode.
let liveTimer: number | undefined;
const scaleInput = el<HTMLInputElement>("thickness-scale");
scaleInput.addEventListener("input", () => {
  const value = Number(scaleInput.value);
  el<HTMLSpanElement>("scale-value").textContent = value.toFixed(2);
  if (!el<HTMLInputElement>("live-preview").checked) return;
  window.clearTimeout(liveTimer);
  liveTimer = window.setTimeout(() => commitScale(value), 150);
});
scaleInput.addEventListener("change", () => commitScale(Number(scaleInput.value)));

function commitScale(value: number): void {
  const c = controller;
  if (!c) return;
  if (c.state.mask.size === 0) {
    toast("paint a mask before scaling thickness");
    syncControls();
    return;
  }
  void c.applyThickness(value);
}

el<HTMLButtonElement>("connect").addEventListener("click", () => void connect());
el<HTMLButtonElement>("clear-mask").addEventListener("click", () => {
  controller?.state.mask.clear();
  repaint();
  refreshDebug();
});
el<HTMLInputElement>("brush-radius").addEventListener("input", (ev) => {
  const value = Number((ev.target as HTMLInputElement).value);
  if (controller) controller.state.brushRadius = value;
  el<HTMLSpanElement>("radius-value").textContent = String(value);
});
el<HTMLSelectElement>("pose-preset").addEventListener("change", (ev) => {
  const c = controller;
  if (!c) return;
  const preset = c.posePresets()[Number((ev.target as HTMLSelectElement).value)];
  if (preset) void c.setPose(preset.pose);
});
el<HTMLSelectElement>("overlay-mode").addEventListener("change", (ev) => {
  overlay = (ev.target as HTMLSelectElement).value as OverlayMode;
  repaint();
});
el<HTMLInputElement>("anatomy-points").addEventListener("change", (ev) => {
  renderer.showAnatomyPoints = (ev.target as HTMLInputElement).checked;
  repaint();
});

toast("set the service URL and press connect", false);
