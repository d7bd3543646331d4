import { ApiClient, LightInfo } from "./api.js";
import { LightPicker } from "./lightPicker.js";
import { ViewState, cycleLight, initialState, normalizeRotation, TWO_PI } from "./state.js";
import { RequestGate, debounce } from "./supersede.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export class App {
  private state: ViewState = initialState();
  private lights: LightInfo[] = [];
  private picker: LightPicker;
  private displayedUrl: string | null = null;
  private readonly gate: RequestGate<Blob>;
  private readonly requestRelight: () => void;

  constructor(private readonly api: ApiClient) {
    this.gate = new RequestGate<Blob>(
      (blob) => this.show(blob),
      (err) => this.toast(String(err)),
    );
    // debounced dispatch: slider scrubs collapse into one request per 120 ms
    const dispatch = debounce(() => this.dispatch(), 120);
    this.requestRelight = dispatch;
    this.picker = new LightPicker(el<HTMLCanvasElement>("light-canvas"), (index) => {
      this.state.mode = "single-light";
      this.state.lightIndex = index;
      this.picker.setSelected(index);
      this.syncModeUi();
      this.dispatch(); // clicks are deliberate: no debounce
    });
  }

  async start(): Promise<void> {
    const sessions = await this.api.sessions();
    const select = el<HTMLSelectElement>("session-select");
    select.innerHTML = "";
    for (const s of sessions) {
      const opt = document.createElement("option");
      opt.value = s.id;
      opt.textContent = `${s.id} (${s.subject || "unnamed"}, ${s.lights} lights)`;
      select.appendChild(opt);
    }
    select.addEventListener("change", () => this.loadSession(select.value));
    this.bindControls();
    if (sessions.length) await this.loadSession(sessions[0].id);
  }

  private async loadSession(id: string): Promise<void> {
    this.state.sessionId = id;
    this.lights = await this.api.lights(id);
    this.state.lightCount = this.lights.length;
    this.state.lightIndex = 0;
    this.picker.setLights(this.lights);
    this.picker.setSelected(0);
    this.dispatch();
  }

  private bindControls(): void {
    const rotation = el<HTMLInputElement>("rotation");
    const exposure = el<HTMLInputElement>("exposure");
    const gamma = el<HTMLInputElement>("gamma");
    const envFile = el<HTMLInputElement>("env-file");

    rotation.addEventListener("input", () => {
      this.state.rotation = normalizeRotation(parseFloat(rotation.value));
      this.state.mode = this.state.envId ? "environment" : this.state.mode;
      this.syncModeUi();
      this.requestRelight();
    });
    exposure.addEventListener("input", () => {
      this.state.exposure = parseFloat(exposure.value);
      this.requestRelight();
    });
    gamma.addEventListener("input", () => {
      this.state.gamma = Math.max(0.1, parseFloat(gamma.value));
      this.requestRelight();
    });
    envFile.addEventListener("change", async () => {
      const file = envFile.files?.[0];
      if (!file || !this.state.sessionId) return;
      try {
        const info = await this.api.uploadEnv(this.state.sessionId, file);
        this.state.envId = info.env_id;
        this.state.mode = "environment";
        this.syncModeUi();
        this.dispatch();
      } catch (err) {
        this.toast(`env upload failed: ${err}`);
      }
    });
    document.addEventListener("keydown", (ev) => {
      if (this.state.mode !== "single-light") return;
      if (ev.key === "ArrowRight" || ev.key === "ArrowLeft") {
        const step = ev.key === "ArrowRight" ? 1 : -1;
        this.state.lightIndex = cycleLight(this.state.lightIndex, this.state.lightCount, step);
        this.picker.setSelected(this.state.lightIndex);
        this.dispatch();
        ev.preventDefault();
      }
    });
  }

  private syncModeUi(): void {
    el<HTMLElement>("mode-label").textContent =
      this.state.mode === "environment"
        ? `environment ${this.state.envId ?? ""} @ ${this.state.rotation.toFixed(3)} rad`
        : `light ${this.state.lightIndex}`;
  }

  /** Issue the request for the current state through the supersession gate. */
  private dispatch(): void {
    const { sessionId } = this.state;
    if (!sessionId) return;
    const snapshot = { ...this.state };
    this.state.requestPending = true;
    this.gate.submit(() =>
      snapshot.mode === "environment" && snapshot.envId
        ? this.api.relight(sessionId, {
            envId: snapshot.envId,
            rotation: snapshot.rotation % TWO_PI,
            exposure: snapshot.exposure,
            gamma: snapshot.gamma,
          })
        : this.api.olat(sessionId, snapshot.lightIndex, snapshot.exposure, snapshot.gamma),
    );
  }

  /** Display exactly the returned bytes; no client-side image math. */
  private show(blob: Blob): void {
    this.state.requestPending = false;
    const img = el<HTMLImageElement>("result");
    const url = URL.createObjectURL(blob);
    if (this.displayedUrl) URL.revokeObjectURL(this.displayedUrl);
    this.displayedUrl = url;
    img.src = url;
  }

  private toast(message: string): void {
    const node = el<HTMLElement>("toast");
    node.textContent = message;
    node.classList.add("visible");
    setTimeout(() => node.classList.remove("visible"), 4000);
  }
}

if (typeof document !== "undefined" && document.getElementById("result")) {
  const app = new App(new ApiClient(""));
  app.start().catch((err) => console.error(err));
}
