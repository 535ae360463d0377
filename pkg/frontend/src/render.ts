/** Raw-WebGL mesh view: orbit camera, flat-lit surface with per-vertex
 * colors (mask tint + heatmaps), anatomy point-cloud overlay, and the
 * CPU-side projection used by the screen-space brush.
 *
 * This module renders buffers it is handed; it never computes surface
 * positions itself — those always come from the service.
 */

import type { CameraOrbit } from "./state.js";
import type { ProjectedVertex } from "./mask.js";
import { heatColor, weightColor, clamp } from "./util.js";

// ---------------------------------------------------------------- matrices

export type Mat4 = Float32Array; // column-major 4x4

export function mat4Multiply(a: Mat4, b: Mat4): Mat4 {
  const out = new Float32Array(16);
  for (let c = 0; c < 4; c++) {
    for (let r = 0; r < 4; r++) {
      out[4 * c + r] =
        a[r] * b[4 * c] +
        a[4 + r] * b[4 * c + 1] +
        a[8 + r] * b[4 * c + 2] +
        a[12 + r] * b[4 * c + 3];
    }
  }
  return out;
}

export function mat4Perspective(
  fovY: number,
  aspect: number,
  near: number,
  far: number,
): Mat4 {
  const f = 1 / Math.tan(fovY / 2);
  const out = new Float32Array(16);
  out[0] = f / aspect;
  out[5] = f;
  out[10] = (far + near) / (near - far);
  out[11] = -1;
  out[14] = (2 * far * near) / (near - far);
  return out;
}

export function mat4LookAt(
  eye: [number, number, number],
  target: [number, number, number],
  up: [number, number, number],
): Mat4 {
  const zx = eye[0] - target[0];
  const zy = eye[1] - target[1];
  const zz = eye[2] - target[2];
  const zl = Math.hypot(zx, zy, zz) || 1;
  const z = [zx / zl, zy / zl, zz / zl];
  const xx = up[1] * z[2] - up[2] * z[1];
  const xy = up[2] * z[0] - up[0] * z[2];
  const xz = up[0] * z[1] - up[1] * z[0];
  const xl = Math.hypot(xx, xy, xz) || 1;
  const x = [xx / xl, xy / xl, xz / xl];
  const y = [
    z[1] * x[2] - z[2] * x[1],
    z[2] * x[0] - z[0] * x[2],
    z[0] * x[1] - z[1] * x[0],
  ];
  const out = new Float32Array(16);
  out.set([x[0], y[0], z[0], 0, x[1], y[1], z[1], 0, x[2], y[2], z[2], 0]);
  out[12] = -(x[0] * eye[0] + x[1] * eye[1] + x[2] * eye[2]);
  out[13] = -(y[0] * eye[0] + y[1] * eye[1] + y[2] * eye[2]);
  out[14] = -(z[0] * eye[0] + z[1] * eye[1] + z[2] * eye[2]);
  out[15] = 1;
  return out;
}

export function cameraEye(cam: CameraOrbit): [number, number, number] {
  const cp = Math.cos(cam.phi);
  return [
    cam.target[0] + cam.distance * cp * Math.sin(cam.theta),
    cam.target[1] + cam.distance * Math.sin(cam.phi),
    cam.target[2] + cam.distance * cp * Math.cos(cam.theta),
  ];
}

export function cameraMatrices(
  cam: CameraOrbit,
  width: number,
  height: number,
): { view: Mat4; proj: Mat4; viewProj: Mat4 } {
  const view = mat4LookAt(cameraEye(cam), cam.target, [0, 1, 0]);
  const proj = mat4Perspective(
    Math.PI / 5,
    width / Math.max(1, height),
    cam.distance / 100,
    cam.distance * 100,
  );
  return { view, proj, viewProj: mat4Multiply(proj, view) };
}

// ----------------------------------------------------------- mesh helpers

/** Area-weighted per-vertex normals (CPU; recomputed on surface swaps). */
export function vertexNormals(
  positions: Float32Array,
  faces: Uint32Array,
): Float32Array {
  const normals = new Float32Array(positions.length);
  for (let t = 0; t < faces.length; t += 3) {
    const a = faces[t] * 3;
    const b = faces[t + 1] * 3;
    const c = faces[t + 2] * 3;
    const ux = positions[b] - positions[a];
    const uy = positions[b + 1] - positions[a + 1];
    const uz = positions[b + 2] - positions[a + 2];
    const vx = positions[c] - positions[a];
    const vy = positions[c + 1] - positions[a + 1];
    const vz = positions[c + 2] - positions[a + 2];
    const nx = uy * vz - uz * vy;
    const ny = uz * vx - ux * vz;
    const nz = ux * vy - uy * vx;
    for (const i of [a, b, c]) {
      normals[i] += nx;
      normals[i + 1] += ny;
      normals[i + 2] += nz;
    }
  }
  for (let i = 0; i < normals.length; i += 3) {
    const l = Math.hypot(normals[i], normals[i + 1], normals[i + 2]) || 1;
    normals[i] /= l;
    normals[i + 1] /= l;
    normals[i + 2] /= l;
  }
  return normals;
}

/** Project vertices to pixel coordinates; `visible` = front-facing under
 * the camera, which is what the brush's depth test keys on. */
export function projectVertices(
  positions: Float32Array,
  normals: Float32Array,
  cam: CameraOrbit,
  width: number,
  height: number,
): ProjectedVertex[] {
  const { viewProj } = cameraMatrices(cam, width, height);
  const eye = cameraEye(cam);
  const n = positions.length / 3;
  const out: ProjectedVertex[] = new Array(n);
  for (let i = 0; i < n; i++) {
    const x = positions[3 * i];
    const y = positions[3 * i + 1];
    const z = positions[3 * i + 2];
    const cw =
      viewProj[3] * x + viewProj[7] * y + viewProj[11] * z + viewProj[15];
    const cx =
      viewProj[0] * x + viewProj[4] * y + viewProj[8] * z + viewProj[12];
    const cy =
      viewProj[1] * x + viewProj[5] * y + viewProj[9] * z + viewProj[13];
    const towardEye =
      normals[3 * i] * (eye[0] - x) +
      normals[3 * i + 1] * (eye[1] - y) +
      normals[3 * i + 2] * (eye[2] - z);
    out[i] = {
      x: ((cx / cw + 1) / 2) * width,
      y: ((1 - cy / cw) / 2) * height,
      visible: cw > 0 && towardEye > 0,
    };
  }
  return out;
}

// -------------------------------------------------------------- GL renderer

const MESH_VS = `
attribute vec3 position;
attribute vec3 normal;
attribute vec3 color;
uniform mat4 viewProj;
varying vec3 vColor;
varying vec3 vNormal;
void main() {
  gl_Position = viewProj * vec4(position, 1.0);
  vColor = color;
  vNormal = normal;
}`;

const MESH_FS = `
precision mediump float;
varying vec3 vColor;
varying vec3 vNormal;
uniform vec3 lightDir;
void main() {
  float lit = 0.35 + 0.65 * max(dot(normalize(vNormal), lightDir), 0.0);
  gl_FragColor = vec4(vColor * lit, 1.0);
}`;

const POINT_VS = `
attribute vec3 position;
uniform mat4 viewProj;
uniform float pointSize;
void main() {
  gl_Position = viewProj * vec4(position, 1.0);
  gl_PointSize = pointSize;
}`;

const POINT_FS = `
precision mediump float;
uniform vec3 pointColor;
void main() { gl_FragColor = vec4(pointColor, 1.0); }`;

export type OverlayMode = "none" | "thickness" | "skinning";

function compile(gl: WebGLRenderingContext, type: number, src: string) {
  const sh = gl.createShader(type)!;
  gl.shaderSource(sh, src);
  gl.compileShader(sh);
  if (!gl.getShaderParameter(sh, gl.COMPILE_STATUS)) {
    throw new Error(`shader: ${gl.getShaderInfoLog(sh)}`);
  }
  return sh;
}

function link(gl: WebGLRenderingContext, vs: string, fs: string) {
  const prog = gl.createProgram()!;
  gl.attachShader(prog, compile(gl, gl.VERTEX_SHADER, vs));
  gl.attachShader(prog, compile(gl, gl.FRAGMENT_SHADER, fs));
  gl.linkProgram(prog);
  if (!gl.getProgramParameter(prog, gl.LINK_STATUS)) {
    throw new Error(`program: ${gl.getProgramInfoLog(prog)}`);
  }
  return prog;
}

export class MeshRenderer {
  private readonly gl: WebGLRenderingContext;
  private readonly meshProg: WebGLProgram;
  private readonly pointProg: WebGLProgram;
  private readonly posBuf: WebGLBuffer;
  private readonly nrmBuf: WebGLBuffer;
  private readonly colBuf: WebGLBuffer;
  private readonly idxBuf: WebGLBuffer;
  private readonly anatomyBuf: WebGLBuffer;
  private indexCount = 0;
  private anatomyCount = 0;
  private positions: Float32Array | null = null;
  private faces: Uint32Array | null = null;
  normals: Float32Array | null = null;
  showAnatomyPoints = false;

  constructor(private readonly canvas: HTMLCanvasElement) {
    const gl = canvas.getContext("webgl");
    if (!gl) throw new Error("WebGL unavailable");
    const ext = gl.getExtension("OES_element_index_uint");
    if (!ext) throw new Error("OES_element_index_uint unavailable");
    this.gl = gl;
    this.meshProg = link(gl, MESH_VS, MESH_FS);
    this.pointProg = link(gl, POINT_VS, POINT_FS);
    this.posBuf = gl.createBuffer()!;
    this.nrmBuf = gl.createBuffer()!;
    this.colBuf = gl.createBuffer()!;
    this.idxBuf = gl.createBuffer()!;
    this.anatomyBuf = gl.createBuffer()!;
    gl.enable(gl.DEPTH_TEST);
    gl.clearColor(0.09, 0.1, 0.12, 1);
  }

  setTopology(faces: Uint32Array): void {
    this.faces = faces;
    this.indexCount = faces.length;
    const gl = this.gl;
    gl.bindBuffer(gl.ELEMENT_ARRAY_BUFFER, this.idxBuf);
    gl.bufferData(gl.ELEMENT_ARRAY_BUFFER, faces, gl.STATIC_DRAW);
  }

  setSurface(positions: Float32Array): void {
    if (!this.faces) throw new Error("setTopology first");
    this.positions = positions;
    this.normals = vertexNormals(positions, this.faces);
    const gl = this.gl;
    gl.bindBuffer(gl.ARRAY_BUFFER, this.posBuf);
    gl.bufferData(gl.ARRAY_BUFFER, positions, gl.DYNAMIC_DRAW);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.nrmBuf);
    gl.bufferData(gl.ARRAY_BUFFER, this.normals, gl.DYNAMIC_DRAW);
  }

  setAnatomyPoints(bone: Float32Array): void {
    this.anatomyCount = bone.length / 3;
    const gl = this.gl;
    gl.bindBuffer(gl.ARRAY_BUFFER, this.anatomyBuf);
    gl.bufferData(gl.ARRAY_BUFFER, bone, gl.STATIC_DRAW);
  }

  /** Base grey, mask tinted, overlay field (already in [0,1]) heat- or
   * weight-mapped where present. */
  setColors(
    vertexCount: number,
    mask: ReadonlySet<number> | { has(i: number): boolean },
    overlay: OverlayMode,
    field: Float32Array | null,
  ): void {
    const colors = new Float32Array(vertexCount * 3);
    for (let i = 0; i < vertexCount; i++) {
      let r = 0.72;
      let g = 0.7;
      let b = 0.68;
      if (overlay !== "none" && field) {
        const t = clamp(field[i], 0, 1);
        [r, g, b] = overlay === "thickness" ? heatColor(t) : weightColor(t);
      }
      if (mask.has(i)) {
        r = 0.2 + 0.6 * r;
        g = 0.45 + 0.45 * g;
        b = 0.95;
      }
      colors[3 * i] = r;
      colors[3 * i + 1] = g;
      colors[3 * i + 2] = b;
    }
    const gl = this.gl;
    gl.bindBuffer(gl.ARRAY_BUFFER, this.colBuf);
    gl.bufferData(gl.ARRAY_BUFFER, colors, gl.DYNAMIC_DRAW);
  }

  project(cam: CameraOrbit): ProjectedVertex[] {
    if (!this.positions || !this.normals) return [];
    return projectVertices(
      this.positions,
      this.normals,
      cam,
      this.canvas.clientWidth,
      this.canvas.clientHeight,
    );
  }

  draw(cam: CameraOrbit): void {
    const gl = this.gl;
    const w = this.canvas.clientWidth;
    const h = this.canvas.clientHeight;
    if (this.canvas.width !== w || this.canvas.height !== h) {
      this.canvas.width = w;
      this.canvas.height = h;
    }
    gl.viewport(0, 0, w, h);
    gl.clear(gl.COLOR_BUFFER_BIT | gl.DEPTH_BUFFER_BIT);
    if (!this.indexCount || !this.positions) return;
    const { viewProj } = cameraMatrices(cam, w, h);

    gl.useProgram(this.meshProg);
    const bind = (buf: WebGLBuffer, name: string) => {
      const loc = gl.getAttribLocation(this.meshProg, name);
      gl.bindBuffer(gl.ARRAY_BUFFER, buf);
      gl.enableVertexAttribArray(loc);
      gl.vertexAttribPointer(loc, 3, gl.FLOAT, false, 0, 0);
    };
    bind(this.posBuf, "position");
    bind(this.nrmBuf, "normal");
    bind(this.colBuf, "color");
    gl.uniformMatrix4fv(
      gl.getUniformLocation(this.meshProg, "viewProj"),
      false,
      viewProj,
    );
    const eye = cameraEye(cam);
    const el = Math.hypot(eye[0], eye[1], eye[2]) || 1;
    gl.uniform3f(
      gl.getUniformLocation(this.meshProg, "lightDir"),
      eye[0] / el,
      eye[1] / el,
      eye[2] / el,
    );
    gl.bindBuffer(gl.ELEMENT_ARRAY_BUFFER, this.idxBuf);
    gl.drawElements(gl.TRIANGLES, this.indexCount, gl.UNSIGNED_INT, 0);

    if (this.showAnatomyPoints && this.anatomyCount) {
      gl.useProgram(this.pointProg);
      const loc = gl.getAttribLocation(this.pointProg, "position");
      gl.bindBuffer(gl.ARRAY_BUFFER, this.anatomyBuf);
      gl.enableVertexAttribArray(loc);
      gl.vertexAttribPointer(loc, 3, gl.FLOAT, false, 0, 0);
      gl.uniformMatrix4fv(
        gl.getUniformLocation(this.pointProg, "viewProj"),
        false,
        viewProj,
      );
      gl.uniform1f(gl.getUniformLocation(this.pointProg, "pointSize"), 2.5);
      gl.uniform3f(
        gl.getUniformLocation(this.pointProg, "pointColor"),
        0.95,
        0.8,
        0.3,
      );
      gl.drawArrays(gl.POINTS, 0, this.anatomyCount);
    }
  }
}
