import { LightInfo } from "./api.js";

export interface DotLayout {
  x: number;
  y: number;
  front: boolean;
  index: number;
}

/** Orthographic front projection (+x right, +y up on screen); rear-hemisphere
 * dots are drawn dimmer but stay pickable. */
export function projectLights(
  lights: LightInfo[],
  width: number,
  height: number,
): DotLayout[] {
  const cx = width / 2;
  const cy = height / 2;
  const scale = 0.45 * Math.min(width, height);
  return lights.map((l) => ({
    x: cx + scale * l.direction[0],
    y: cy - scale * l.direction[1],
    front: l.direction[2] <= 0,
    index: l.index,
  }));
}

/** Nearest dot within `radius` px of the click, or null. Ties break to the
 * lower light index. */
export function pickLight(
  dots: DotLayout[],
  x: number,
  y: number,
  radius = 10,
): number | null {
  let best: number | null = null;
  let bestDist = radius;
  for (const dot of dots) {
    const d = Math.hypot(dot.x - x, dot.y - y);
    if (d < bestDist || (d === bestDist && best !== null && dot.index < best)) {
      bestDist = d;
      best = dot.index;
    }
  }
  return best;
}

export class LightPicker {
  private dots: DotLayout[] = [];
  private selected = -1;

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly onPick: (index: number) => void,
  ) {
    canvas.addEventListener("click", (ev) => {
      const rect = canvas.getBoundingClientRect();
      const hit = pickLight(this.dots, ev.clientX - rect.left, ev.clientY - rect.top);
      if (hit !== null) this.onPick(hit);
    });
  }

  setLights(lights: LightInfo[]): void {
    this.dots = projectLights(lights, this.canvas.width, this.canvas.height);
    this.draw();
  }

  setSelected(index: number): void {
    this.selected = index;
    this.draw();
  }

  private draw(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    const { width, height } = this.canvas;
    ctx.clearRect(0, 0, width, height);
    ctx.strokeStyle = "#444";
    ctx.beginPath();
    ctx.arc(width / 2, height / 2, 0.45 * Math.min(width, height), 0, 2 * Math.PI);
    ctx.stroke();
    for (const dot of this.dots) {
      ctx.beginPath();
      ctx.arc(dot.x, dot.y, dot.index === this.selected ? 6 : 3.5, 0, 2 * Math.PI);
      ctx.fillStyle = dot.index === this.selected ? "#ffb347" : dot.front ? "#9ecbff" : "#3b5268";
      ctx.fill();
    }
  }
}
