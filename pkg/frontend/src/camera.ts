/** Camera lifecycle: live preview plus PNG frame capture for upload. */

export class Camera {
  private stream: MediaStream | null = null;

  get active(): boolean {
    return this.stream !== null;
  }

  async start(video: HTMLVideoElement): Promise<void> {
    this.stream = await navigator.mediaDevices.getUserMedia({ video: true });
    video.srcObject = this.stream;
    await video.play();
  }

  stop(video: HTMLVideoElement): void {
    for (const track of this.stream?.getTracks() ?? []) {
      track.stop();
    }
    this.stream = null;
    video.srcObject = null;
  }

  /** Snapshot the current frame as a PNG blob. */
  capture(video: HTMLVideoElement): Promise<Blob> {
    const canvas = document.createElement("canvas");
    canvas.width = video.videoWidth;
    canvas.height = video.videoHeight;
    const ctx = canvas.getContext("2d");
    if (!ctx) {
      return Promise.reject(new Error("canvas 2d context unavailable"));
    }
    ctx.drawImage(video, 0, 0);
    return new Promise((resolve, reject) => {
      canvas.toBlob(
        (blob) => (blob ? resolve(blob) : reject(new Error("frame capture failed"))),
        "image/png",
      );
    });
  }
}
