/** Two-panel slice viewer: the subject volume on the left, the shared
 * reference space on the right, crosshairs linked through service
 * responses. The page never computes anatomy itself; labels, coordinates,
 * and navigation paths are rendered verbatim from the HTTP API.
 */

import {
  AtlasMetadata, Client, LandmarkResponse, QueryResponse, ServiceError,
  UploadResponse,
} from "./api.js";
import { fmt3, fmtLatency } from "./format.js";
import {
  Axis, Vec3, clampIndex, pixelFromWorld, sliceCount, sliceShape,
  worldFromPixel,
} from "./geometry.js";
import { LatestWins } from "./queue.js";

export const PIXEL_SCALE = 4;      // CSS zoom of slice pixels
export const ATLAS_PANEL_PX = 320; // square schematic, 1 px per mm, centered

export interface ViewerState {
  session: UploadResponse | null;
  axis: Axis;
  index: number;
  window: { lo: number; hi: number } | null;
  atlas: AtlasMetadata | null;
  lastQuery: QueryResponse | null;
  lastLandmark: LandmarkResponse | null;
}

const PANEL_HTML = `
  <div class="toolbar">
    <input type="file" id="vol-file">
    <label>axis <select id="axis-select">
      <option value="z" selected>z</option>
      <option value="y">y</option>
      <option value="x">x</option>
    </select></label>
    <label>slice <input type="range" id="index-slider" min="0" max="0" value="0">
      <span id="index-label">-</span></label>
    <label>window <input type="text" id="window-input" size="10"
      placeholder="-1024,3071"></label>
  </div>
  <div class="panels">
    <div class="panel">
      <h2>subject</h2>
      <div class="slice-wrap" id="slice-wrap">
        <img id="slice-img" alt="slice">
        <svg id="path-svg"><polyline id="path-line" fill="none"></polyline>
          <circle id="path-end" r="4" visibility="hidden"></circle></svg>
        <div class="cross" id="subject-cross" hidden></div>
      </div>
    </div>
    <div class="panel">
      <h2>reference space</h2>
      <div class="atlas-wrap" id="atlas-panel">
        <div class="cross atlas" id="atlas-cross" hidden></div>
      </div>
      <div id="atlas-z"></div>
    </div>
  </div>
  <div class="readout">
    <div>label: <b id="label-name">-</b></div>
    <div>normalized: <span id="normalized">-</span></div>
    <div>atlas point mm: <span id="atlas-point">-</span></div>
    <div>latency: <span id="latency">-</span></div>
  </div>
  <div class="landmark-bar">
    <input type="text" id="landmark-name" placeholder="landmark name">
    <button id="landmark-go">find landmark</button>
    <span id="landmark-status"></span>
    <span id="landmark-final"></span>
    <span id="landmark-iters"></span>
    <div id="available"></div>
  </div>
  <div id="status"></div>
`;

function grab<T extends HTMLElement>(root: HTMLElement, id: string): T {
  const el = root.querySelector<T>(`#${id}`);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
}

export class Viewer {
  readonly state: ViewerState = {
    session: null, axis: "z", index: 0, window: null,
    atlas: null, lastQuery: null, lastLandmark: null,
  };
  readonly queue = new LatestWins();
  private readonly els: Record<string, HTMLElement>;

  constructor(readonly root: HTMLElement, readonly client: Client) {
    root.innerHTML = PANEL_HTML;
    this.els = Object.fromEntries(
      ["vol-file", "axis-select", "index-slider", "index-label", "window-input",
       "slice-wrap", "slice-img", "path-svg", "path-line", "path-end",
       "subject-cross", "atlas-panel", "atlas-cross", "atlas-z", "label-name",
       "normalized", "atlas-point", "latency", "landmark-name", "landmark-go",
       "landmark-status", "landmark-final", "landmark-iters", "available",
       "status"].map((id) => [id, grab(root, id)]));
    this.wire();
  }

  private wire(): void {
    this.els["vol-file"].addEventListener("change", () => {
      const input = this.els["vol-file"] as HTMLInputElement;
      const file = input.files && input.files[0];
      if (file) {
        void file.arrayBuffer().then((buf) =>
          this.loadVolume(new Uint8Array(buf)));
      }
    });
    this.els["axis-select"].addEventListener("change", () => {
      this.setAxis((this.els["axis-select"] as HTMLSelectElement).value as Axis);
    });
    this.els["index-slider"].addEventListener("input", () => {
      this.setIndex(Number((this.els["index-slider"] as HTMLInputElement).value));
    });
    this.els["window-input"].addEventListener("change", () => {
      const raw = (this.els["window-input"] as HTMLInputElement).value.trim();
      const m = raw.split(",").map(Number);
      if (m.length === 2 && m.every(Number.isFinite) && m[0] < m[1]) {
        this.state.window = { lo: m[0], hi: m[1] };
        this.refreshSlice();
      } else {
        this.showStatus(`bad window ${JSON.stringify(raw)}; use lo,hi`);
      }
    });
    this.els["slice-img"].addEventListener("click", (ev) => {
      const rect = (this.els["slice-img"]).getBoundingClientRect();
      const me = ev as MouseEvent;
      const col = Math.floor((me.clientX - rect.left) / PIXEL_SCALE);
      const row = Math.floor((me.clientY - rect.top) / PIXEL_SCALE);
      this.clickPixel(col, row);
    });
    this.els["landmark-go"].addEventListener("click", () => {
      const name = (this.els["landmark-name"] as HTMLInputElement).value.trim();
      if (name) void this.promptLandmark(name);
    });
  }

  async connect(): Promise<void> {
    try {
      const meta = await this.client.atlas();
      this.state.atlas = meta;
      this.drawAtlasLandmarks(meta);
      this.showStatus(
        `atlas: reference ${meta.reference_point.name}, `
        + `${Object.keys(meta.landmarks).length} landmarks, `
        + `${Object.keys(meta.labels).length} labels`);
    } catch (e) {
      this.showError(e);
    }
  }

  async loadVolume(bytes: Uint8Array): Promise<void> {
    try {
      const sess = await this.client.uploadVolume(bytes);
      this.state.session = sess;
      this.state.axis = "z";
      this.state.index = clampIndex(sess.dims, "z", sess.dims[2] / 2);
      this.clearLandmark();
      this.refreshSlice();
      this.showStatus(
        `session ${sess.session_id}: ${sess.dims.join("x")} voxels`);
    } catch (e) {
      this.showError(e); // state unchanged on a rejected upload
    }
  }

  setAxis(axis: Axis): void {
    const s = this.state.session;
    if (!s) return;
    this.state.axis = axis;
    this.state.index = clampIndex(s.dims, axis, sliceCount(s.dims, axis) / 2);
    this.clearLandmark();
    this.refreshSlice();
  }

  setIndex(index: number): void {
    const s = this.state.session;
    if (!s) return;
    this.state.index = clampIndex(s.dims, this.state.axis, index);
    this.refreshSlice();
  }

  /** Click entry point: at most one query in flight, latest click wins. */
  clickPixel(col: number, row: number): void {
    this.queue.submit(() => this.queryAt(col, row));
  }

  async queryAt(col: number, row: number): Promise<void> {
    const s = this.state.session;
    if (!s) return;
    const shape = sliceShape(s.dims, this.state.axis);
    if (col < 0 || row < 0 || col >= shape.cols || row >= shape.rows) return;
    const p = worldFromPixel(s.origin, s.spacing, this.state.axis,
                             this.state.index, col, row);
    try {
      const res = await this.client.query(s.session_id, p);
      this.state.lastQuery = res;
      this.els["label-name"].textContent = res.label_name;
      this.els["normalized"].textContent = fmt3(res.normalized);
      this.els["atlas-point"].textContent = fmt3(res.atlas_point_mm);
      this.els["latency"].textContent = fmtLatency(res.latency_us);
      this.placeSubjectCross(col, row);
      this.placeAtlasCross(res.atlas_point_mm);
    } catch (e) {
      this.showError(e);
    }
  }

  async promptLandmark(name: string): Promise<void> {
    const s = this.state.session;
    if (!s) return;
    try {
      const res = await this.client.landmark(s.session_id, { name });
      this.state.lastLandmark = res;
      this.els["available"].textContent = "";
      this.renderPath(res);
    } catch (e) {
      if (e instanceof ServiceError && e.status === 422
          && e.detail && typeof e.detail === "object") {
        const d = e.detail as { message?: string; available?: string[] };
        this.els["available"].textContent =
          `${d.message ?? "unknown landmark"}; available: `
          + `${(d.available ?? []).join(", ")}`;
      } else {
        this.showError(e);
      }
    }
  }

  /** The full returned path is in the DOM at once; the reveal is CSS. */
  private renderPath(res: LandmarkResponse): void {
    const s = this.state.session;
    if (!s) return;
    const pts = res.path.map((w) => {
      const px = pixelFromWorld(s.origin, s.spacing, this.state.axis, w);
      return `${(px.col + 0.5) * PIXEL_SCALE},${(px.row + 0.5) * PIXEL_SCALE}`;
    });
    this.els["path-line"].setAttribute("points", pts.join(" "));
    this.els["path-line"].classList.remove("animate");
    void (this.els["path-line"] as unknown as SVGElement).getBoundingClientRect;
    this.els["path-line"].classList.add("animate");
    const end = pixelFromWorld(s.origin, s.spacing, this.state.axis,
                               res.point_mm);
    this.els["path-end"].setAttribute("cx", String((end.col + 0.5) * PIXEL_SCALE));
    this.els["path-end"].setAttribute("cy", String((end.row + 0.5) * PIXEL_SCALE));
    this.els["path-end"].setAttribute("visibility", "visible");
    this.els["landmark-final"].textContent = fmt3(res.point_mm);
    this.els["landmark-status"].textContent =
      res.converged ? "converged" : "not converged";
    this.els["landmark-status"].className =
      res.converged ? "badge ok" : "badge warn";
    this.els["landmark-iters"].textContent = `${res.iterations} iterations`;
  }

  private clearLandmark(): void {
    this.els["path-line"].setAttribute("points", "");
    this.els["path-end"].setAttribute("visibility", "hidden");
    this.els["landmark-final"].textContent = "";
    this.els["landmark-status"].textContent = "";
    this.els["landmark-iters"].textContent = "";
  }

  private placeSubjectCross(col: number, row: number): void {
    const cross = this.els["subject-cross"];
    cross.hidden = false;
    cross.style.left = `${(col + 0.5) * PIXEL_SCALE}px`;
    cross.style.top = `${(row + 0.5) * PIXEL_SCALE}px`;
  }

  /** Atlas panel: axial schematic at 1 px/mm centered on the reference. */
  private placeAtlasCross(atlasPointMm: Vec3): void {
    const cross = this.els["atlas-cross"];
    cross.hidden = false;
    cross.style.left = `${ATLAS_PANEL_PX / 2 + atlasPointMm[0]}px`;
    cross.style.top = `${ATLAS_PANEL_PX / 2 + atlasPointMm[1]}px`;
    this.els["atlas-z"].textContent = `z = ${atlasPointMm[2].toFixed(1)} mm`;
  }

  private drawAtlasLandmarks(meta: AtlasMetadata): void {
    for (const [name, w] of Object.entries(meta.landmarks)) {
      const dot = this.root.ownerDocument.createElement("div");
      dot.className = "atlas-dot";
      dot.title = name;
      dot.style.left = `${ATLAS_PANEL_PX / 2 + w[0]}px`;
      dot.style.top = `${ATLAS_PANEL_PX / 2 + w[1]}px`;
      this.els["atlas-panel"].appendChild(dot);
    }
  }

  private refreshSlice(): void {
    const s = this.state.session;
    if (!s) return;
    const { axis, index } = this.state;
    const shape = sliceShape(s.dims, axis);
    const img = this.els["slice-img"] as HTMLImageElement;
    img.src = this.client.sliceUrl(s.session_id, axis, index,
                                   this.state.window ?? undefined);
    img.style.width = `${shape.cols * PIXEL_SCALE}px`;
    img.style.height = `${shape.rows * PIXEL_SCALE}px`;
    const svg = this.els["path-svg"];
    svg.setAttribute("width", String(shape.cols * PIXEL_SCALE));
    svg.setAttribute("height", String(shape.rows * PIXEL_SCALE));
    const slider = this.els["index-slider"] as HTMLInputElement;
    slider.max = String(sliceCount(s.dims, axis) - 1);
    slider.value = String(index);
    this.els["index-label"].textContent =
      `${index} / ${sliceCount(s.dims, axis) - 1}`;
  }

  private showStatus(msg: string): void {
    this.els["status"].textContent = msg;
  }

  private showError(e: unknown): void {
    const msg = e instanceof ServiceError
      ? `service error ${e.status}: ${e.message}`
      : String(e);
    this.showStatus(msg);
  }
}

export function createViewer(root: HTMLElement, client: Client): Viewer {
  return new Viewer(root, client);
}
